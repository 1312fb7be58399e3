"""Cluster simulation: timing model, determinism, both exit modes."""

import numpy as np
import pytest

from distree.kernels import (
    Conv2d,
    Fc,
    GlobalAvgPool,
    Relu,
    tensor,
)
from distree.model import (
    BranchNetSpec,
    Cell,
    count_flops,
    forward_to_exit,
    fusion_forward,
    validate_spec,
)
from distree.policies import PolicyConfig
from distree.simulator import (
    ClusterConfig,
    DeviceProfile,
    LinkProfile,
    default_cluster,
    simulate_dataset,
    simulate_inference,
)
from distree.weights import random_weights


def tiny_spec(num_exits=7, n_students=2, classes=10):
    """Small 7-exit net at 8x8 input; fast enough for thousand-input runs."""
    stages = []
    ch = 2
    for j in range(num_exits):
        out_ch = 3
        stages.append((Cell("c", (Conv2d("conv", ch, out_ch, 3, 1, 1), Relu("relu"))),))
        ch = out_ch
    exits = tuple(
        Cell("e", (Conv2d("conv", 3, 4, 1, 1, 0), Relu("relu"), GlobalAvgPool("gap")))
        for _ in range(num_exits))
    spec = BranchNetSpec(
        stages=tuple(stages), exits=exits,
        fusion=Fc("fc", n_students * 4, classes),
        exit_positions=tuple(range(1, num_exits + 1)),
        class_count=classes, n_students=n_students, feature_dim=4,
        input_shape=(2, 8, 8))
    validate_spec(spec)
    return spec


class TinyImage:
    """Duck-typed stand-in for LabeledImage at the tiny net's input shape."""

    def __init__(self, pixels, label):
        self.pixels = pixels
        self.label = label


def _image(rng, shape):
    return TinyImage(tensor(rng.normal(size=shape)), int(rng.integers(0, 10)))


def tiny_images(n, seed=0, shape=(2, 8, 8)):
    rng = np.random.default_rng(seed)
    return [_image(rng, shape) for _ in range(n)]


@pytest.fixture(scope="module")
def tiny():
    spec = tiny_spec()
    return spec, random_weights(spec, seed=7), count_flops(spec)


class TestTiming:
    def test_degenerate_single_device_makespan(self, tiny):
        spec7 = tiny_spec(n_students=1)
        weights = random_weights(spec7, seed=1)
        flops = count_flops(spec7)
        cluster = ClusterConfig(
            devices=(DeviceProfile("d0", 1e6, 0.0),),
            links=(LinkProfile(1e18, 0.0),),  # effectively infinite bandwidth
            coordinator=DeviceProfile("coord", 1e6, 0.0))
        image = _image(np.random.default_rng(0), (2, 8, 8))
        trace = simulate_inference(spec7, weights, image, PolicyConfig("last_exit"),
                                   cluster, flops=flops)
        expected = (flops.total_forward_all_exits / 1e6
                    + 4 * spec7.feature_dim / 1e18
                    + flops.fusion_flops / 1e6)
        assert trace.makespan == pytest.approx(expected, rel=1e-9)

    def test_transfer_time_formula(self, tiny):
        spec, weights, flops = tiny
        cluster = ClusterConfig(
            devices=tuple(DeviceProfile(f"d{i}", 1e9) for i in range(2)),
            links=(LinkProfile(1_048_576.0, 0.003), LinkProfile(1_048_576.0, 0.003)),
            coordinator=DeviceProfile("coord", 1e9))
        image = _image(np.random.default_rng(1), (2, 8, 8))
        trace = simulate_inference(spec, weights, image, PolicyConfig("last_exit"),
                                   cluster, flops=flops)
        # 4 bytes x 4 floats over 1 MiB/s plus latency
        assert trace.students[0].transfer_time == pytest.approx(16 / 1_048_576 + 0.003)

    def test_slow_link_dominates(self, tiny):
        spec, weights, flops = tiny
        fast = LinkProfile(1e9, 0.0)
        slow = LinkProfile(1e9, 0.5)
        cluster = ClusterConfig(
            devices=tuple(DeviceProfile(f"d{i}", 1e9) for i in range(2)),
            links=(fast, slow),
            coordinator=DeviceProfile("coord", 1e9))
        image = _image(np.random.default_rng(2), (2, 8, 8))
        trace = simulate_inference(spec, weights, image, PolicyConfig("last_exit"),
                                   cluster, flops=flops)
        assert trace.makespan >= 0.5
        slowest = max(s.compute_time + s.transfer_time for s in trace.students)
        assert trace.makespan == pytest.approx(slowest + trace.fusion_time)

    def test_makespan_monotone_in_rate_and_bandwidth(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(5, seed=3)
        base = default_cluster(2)
        faster = ClusterConfig(
            devices=tuple(DeviceProfile(d.device_id, d.compute_rate * 3,
                                        d.per_inference_overhead) for d in base.devices),
            links=tuple(LinkProfile(l.bandwidth * 5, l.latency) for l in base.links),
            coordinator=base.coordinator)
        for policy in (PolicyConfig("last_exit"),
                       PolicyConfig("feature_diff", (1.0,) * 7)):
            r_base = simulate_dataset(spec, weights, images, policy, base, flops=flops)
            r_fast = simulate_dataset(spec, weights, images, policy, faster, flops=flops)
            for a, b in zip(r_base.traces, r_fast.traces):
                assert b.makespan <= a.makespan + 1e-12


class TestDeterminism:
    def test_identical_runs_identical_traces(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(20, seed=5)
        cluster = default_cluster(2, seed=9)
        for policy in (PolicyConfig("random", seed=1),
                       PolicyConfig("feature_diff", (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6))):
            a = simulate_dataset(spec, weights, images, policy, cluster, flops=flops)
            b = simulate_dataset(spec, weights, images, policy, cluster, flops=flops)
            for ta, tb in zip(a.traces, b.traces):
                assert ta.makespan == tb.makespan
                assert ta.predicted_label == tb.predicted_label
                assert [s.exit_index for s in ta.students] == \
                    [s.exit_index for s in tb.students]

    def test_random_policy_varies_per_input_but_reproducibly(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(50, seed=6)
        cluster = default_cluster(2)
        result = simulate_dataset(spec, weights, images, PolicyConfig("random", seed=4),
                                  cluster, flops=flops)
        exits = [s.exit_index for t in result.traces for s in t.students]
        assert len(set(exits)) > 1  # not stuck on a single draw


class TestExitModes:
    def test_independent_students_may_diverge(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(30, seed=8)
        cluster = default_cluster(2)
        result = simulate_dataset(spec, weights, images,
                                  PolicyConfig("random", seed=11), cluster, flops=flops)
        diverged = any(len({s.exit_index for s in t.students}) > 1
                       for t in result.traces)
        assert diverged

    def test_synchronized_students_agree(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(30, seed=8)
        cluster = ClusterConfig(
            devices=tuple(DeviceProfile(f"d{i}", 2e7) for i in range(2)),
            links=tuple(LinkProfile(1e6) for _ in range(2)),
            coordinator=DeviceProfile("coord", 2e7),
            exit_mode="synchronized")
        for policy in (PolicyConfig("random", seed=11),
                       PolicyConfig("feature_diff", (1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3))):
            result = simulate_dataset(spec, weights, images, policy, cluster, flops=flops)
            for t in result.traces:
                assert len({s.exit_index for s in t.students}) == 1

    def test_synchronized_exits_at_first_all_pass(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(10, seed=12)
        sync = ClusterConfig(
            devices=tuple(DeviceProfile(f"d{i}", 2e7) for i in range(2)),
            links=tuple(LinkProfile(1e6) for _ in range(2)),
            coordinator=DeviceProfile("coord", 2e7),
            exit_mode="synchronized")
        indep = default_cluster(2)
        policy = PolicyConfig("feature_diff", (1.0, 1.02, 1.04, 1.06, 1.08, 1.10, 1.12))
        r_sync = simulate_dataset(spec, weights, images, policy, sync, flops=flops)
        r_ind = simulate_dataset(spec, weights, images, policy, indep, flops=flops)
        for ts, ti in zip(r_sync.traces, r_ind.traces):
            # group exit cannot precede any student's own first crossing
            assert ts.students[0].exit_index >= max(s.exit_index for s in ti.students)

    def test_fused_values_match_direct_evaluation(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(10, seed=13)
        cluster = default_cluster(2)
        result = simulate_dataset(spec, weights, images, PolicyConfig("last_exit"),
                                  cluster, flops=flops)
        for image, trace in zip(images, result.traces):
            feats = [forward_to_exit(spec, weights, i, spec.num_exits, image.pixels)
                     for i in range(2)]
            logits = fusion_forward(spec, weights, feats)
            assert trace.predicted_label == int(np.argmax(logits))


class TestAggregates:
    def test_last_exit_mean_flops_equals_static_totals(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(12, seed=14)
        cluster = default_cluster(2)
        r_all = simulate_dataset(spec, weights, images, PolicyConfig("last_exit"),
                                 cluster, exit_eval="all", flops=flops)
        assert r_all.mean_flops_per_student == flops.total_forward_all_exits
        r_needed = simulate_dataset(spec, weights, images, PolicyConfig("last_exit"),
                                    cluster, exit_eval="needed", flops=flops)
        assert r_needed.mean_flops_per_student == flops.total_forward_final

    def test_histogram_sums_to_dataset_size(self, tiny):
        spec, weights, flops = tiny
        images = tiny_images(25, seed=15)
        result = simulate_dataset(spec, weights, images, PolicyConfig("random", seed=2),
                                  default_cluster(2), flops=flops)
        hist = result.exit_histogram(spec.num_exits)
        assert all(sum(row) == 25 for row in hist)

    def test_empty_dataset_rejected(self, tiny):
        spec, weights, _ = tiny
        with pytest.raises(ValueError, match="empty"):
            simulate_dataset(spec, weights, [], PolicyConfig("last_exit"),
                             default_cluster(2))

    def test_cluster_arity_mismatch(self, tiny):
        spec, weights, flops = tiny
        image = _image(np.random.default_rng(0), (2, 8, 8))
        with pytest.raises(ValueError, match="devices"):
            simulate_inference(spec, weights, image, PolicyConfig("last_exit"),
                               default_cluster(3), flops=flops)


class TestConfigIO:
    def test_cluster_json_round_trip(self):
        cluster = default_cluster(2, seed=3)
        again = ClusterConfig.from_dict(cluster.to_dict())
        assert again == cluster

    def test_invalid_profiles(self):
        with pytest.raises(ValueError):
            DeviceProfile("d", 0.0)
        with pytest.raises(ValueError):
            LinkProfile(0.0)
        with pytest.raises(ValueError, match="exit_mode"):
            ClusterConfig((DeviceProfile("d", 1.0),), (LinkProfile(1.0),),
                          DeviceProfile("c", 1.0), exit_mode="psychic")
