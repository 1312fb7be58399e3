"""Deterministic edge-cluster simulation.

N devices each run one student under an exit policy, ship their exit
feature to a coordinator over a modeled link, and the coordinator fuses
them. Timing is analytic: compute time is FLOPs divided by the device's
rate plus a fixed per-inference overhead; transfer time is payload bytes
over bandwidth plus link latency; makespan is the slowest student's
compute + transfer plus the coordinator's fusion time. The timing model
never alters values, so fused predictions match a direct evaluation.

One inference is in flight at a time; there is no queueing or contention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import LabeledImage
from .model import BranchNetSpec, count_flops, forward_exit, forward_stage, fusion_forward
from .policies import ExitController, PolicyConfig, run_policy, student_probabilities

FEATURE_BYTES_PER_FLOAT = 4


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    compute_rate: float  # FLOPs per second
    per_inference_overhead: float = 0.0  # seconds

    def __post_init__(self):
        if self.compute_rate <= 0:
            raise ValueError(f"{self.device_id}: compute_rate must be positive")
        if self.per_inference_overhead < 0:
            raise ValueError(f"{self.device_id}: negative overhead")


@dataclass(frozen=True)
class LinkProfile:
    bandwidth: float  # bytes per second
    latency: float = 0.0  # seconds per message

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("negative latency")


@dataclass(frozen=True)
class ClusterConfig:
    devices: tuple[DeviceProfile, ...]
    links: tuple[LinkProfile, ...]
    coordinator: DeviceProfile
    exit_mode: str = "independent"
    seed: int = 0

    def __post_init__(self):
        if len(self.devices) != len(self.links):
            raise ValueError(f"{len(self.devices)} devices but {len(self.links)} links")
        if not self.devices:
            raise ValueError("cluster needs at least one device")
        if self.exit_mode not in ("independent", "synchronized"):
            raise ValueError(f"exit_mode {self.exit_mode!r} not in "
                             "('independent', 'synchronized')")

    @property
    def n(self) -> int:
        return len(self.devices)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        devices = tuple(DeviceProfile(**dev) for dev in d["devices"])
        links = tuple(LinkProfile(**link) for link in d["links"])
        coordinator = DeviceProfile(**d["coordinator"])
        return cls(devices, links, coordinator,
                   exit_mode=d.get("exit_mode", "independent"),
                   seed=int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {
            "devices": [vars(dev) for dev in self.devices],
            "links": [vars(link) for link in self.links],
            "coordinator": vars(self.coordinator),
            "exit_mode": self.exit_mode,
            "seed": self.seed,
        }


def default_cluster(n: int, seed: int = 0) -> ClusterConfig:
    """Calibrated profile: ~20 MFLOPs/s devices put a full WRN-16x1 forward
    in the reported benchmark's second-scale latency band."""
    return ClusterConfig(
        devices=tuple(DeviceProfile(f"edge{i}", 2.0e7, 0.005) for i in range(n)),
        links=tuple(LinkProfile(1_048_576.0, 0.002) for _ in range(n)),
        coordinator=DeviceProfile("coordinator", 2.0e7, 0.001),
        exit_mode="independent",
        seed=seed,
    )


@dataclass
class StudentTrace:
    student_id: int
    exit_index: int
    exited_early: bool
    measure_values: list[float]
    flops: int
    compute_time: float
    transfer_time: float
    degenerate_events: int


@dataclass
class InferenceTrace:
    input_id: int
    students: list[StudentTrace]
    fusion_flops: int
    fusion_time: float
    makespan: float
    predicted_label: int
    true_label: int


def _derived_seed(policy: PolicyConfig, input_id: int, student_id: int) -> Optional[int]:
    if policy.kind != "random":
        return None
    ss = np.random.SeedSequence([policy.seed & 0xFFFFFFFFFFFFFFFF, input_id, student_id])
    return int(ss.generate_state(1)[0])


def simulate_inference(spec: BranchNetSpec, weights, image: LabeledImage,
                       policy: PolicyConfig, cluster: ClusterConfig,
                       input_id: int = 0, exit_eval: str = "all",
                       flops=None) -> InferenceTrace:
    if cluster.n != spec.n_students:
        raise ValueError(f"cluster has {cluster.n} devices for {spec.n_students} students")
    costs = flops if flops is not None else count_flops(spec)
    if cluster.exit_mode == "synchronized":
        features, traces = _synchronized_pass(spec, weights, image.pixels, policy,
                                              cluster, input_id, exit_eval, costs)
    else:
        features = []
        traces = []
        for i in range(spec.n_students):
            decision, feature, used = run_policy(
                spec, weights, i, image.pixels, policy, exit_eval=exit_eval,
                flops=costs, seed=_derived_seed(policy, input_id, i))
            features.append(feature)
            traces.append(_student_trace(i, decision, used, cluster, spec))
    logits = fusion_forward(spec, weights, features)
    fusion_time = (costs.fusion_flops / cluster.coordinator.compute_rate
                   + cluster.coordinator.per_inference_overhead)
    makespan = max(t.compute_time + t.transfer_time for t in traces) + fusion_time
    return InferenceTrace(
        input_id=input_id,
        students=traces,
        fusion_flops=costs.fusion_flops,
        fusion_time=fusion_time,
        makespan=makespan,
        predicted_label=int(np.argmax(logits)),
        true_label=image.label,
    )


def _student_trace(i: int, decision, used: int, cluster: ClusterConfig,
                   spec: BranchNetSpec) -> StudentTrace:
    device = cluster.devices[i]
    link = cluster.links[i]
    payload = FEATURE_BYTES_PER_FLOAT * spec.feature_dim
    return StudentTrace(
        student_id=i,
        exit_index=decision.exit_index,
        exited_early=decision.exited_early,
        measure_values=decision.measure_values,
        flops=used,
        compute_time=used / device.compute_rate + device.per_inference_overhead,
        transfer_time=payload / link.bandwidth + link.latency,
        degenerate_events=decision.degenerate_events,
    )


def _synchronized_pass(spec, weights, pixels, policy, cluster, input_id, exit_eval, costs):
    """All students exit at the first boundary where every one of them passes."""
    n = spec.n_students
    controllers = []
    for i in range(n):
        s = _derived_seed(policy, input_id, i)
        cfg = policy if s is None else PolicyConfig(policy.kind, policy.thresholds, s,
                                                    policy.strict_compare)
        controllers.append(ExitController(cfg, spec.num_exits))
    acts = [pixels for _ in range(n)]
    used = [0] * n
    aux_flops = spec.feature_dim * spec.class_count + spec.class_count
    features: list = [None] * n
    for j in range(1, spec.num_exits + 1):
        votes = []
        for i in range(n):
            acts[i] = forward_stage(spec, weights, i, j, acts[i])
            used[i] += costs.stage_flops[j - 1]
            feature = None
            probs = None
            if exit_eval == "all" or controllers[i].requires_feature(j):
                feature = forward_exit(spec, weights, i, j, acts[i])
                used[i] += costs.exit_flops[j - 1]
                if policy.kind == "entropy":
                    probs = student_probabilities(spec, weights, i, feature)
                    used[i] += aux_flops
            features[i] = feature
            votes.append(controllers[i].step(j, feature, probs))
        if all(votes):
            for i in range(n):
                if features[i] is None:
                    features[i] = forward_exit(spec, weights, i, j, acts[i])
                    used[i] += costs.exit_flops[j - 1]
            traces = [_student_trace(i, controllers[i].decision(j), used[i], cluster, spec)
                      for i in range(n)]
            return features, traces
    raise AssertionError("synchronized pass failed to exit at the last boundary")


@dataclass
class DatasetResult:
    traces: list[InferenceTrace]
    policy: PolicyConfig
    exit_eval: str

    @property
    def accuracy_pct(self) -> float:
        correct = sum(t.predicted_label == t.true_label for t in self.traces)
        return 100.0 * correct / len(self.traces)

    @property
    def mean_flops_per_student(self) -> float:
        total = sum(s.flops for t in self.traces for s in t.students)
        n_students = len(self.traces[0].students)
        return total / (len(self.traces) * n_students)

    @property
    def mean_makespan(self) -> float:
        return float(np.mean([t.makespan for t in self.traces]))

    @property
    def mean_transfer(self) -> float:
        return float(np.mean([s.transfer_time for t in self.traces for s in t.students]))

    def makespan_percentile(self, q: float) -> float:
        return float(np.percentile([t.makespan for t in self.traces], q))

    def exit_histogram(self, num_exits: int) -> list[list[int]]:
        """Per-student exit counts; each row sums to the dataset size."""
        n_students = len(self.traces[0].students)
        hist = [[0] * num_exits for _ in range(n_students)]
        for t in self.traces:
            for s in t.students:
                hist[s.student_id][s.exit_index - 1] += 1
        return hist


def simulate_dataset(spec: BranchNetSpec, weights, dataset: Sequence[LabeledImage],
                     policy: PolicyConfig, cluster: ClusterConfig,
                     exit_eval: str = "all", flops=None) -> DatasetResult:
    if not dataset:
        raise ValueError("empty dataset")
    costs = flops if flops is not None else count_flops(spec)
    traces = [
        simulate_inference(spec, weights, image, policy, cluster,
                           input_id=idx, exit_eval=exit_eval, flops=costs)
        for idx, image in enumerate(dataset)
    ]
    return DatasetResult(traces, policy, exit_eval)
