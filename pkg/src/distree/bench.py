"""Report builders behind the service endpoints and the CLI.

Every report embeds the resolved config fingerprint, the weight-file
fingerprint where one is involved, the seed, and the FLOPs convention,
so equal fingerprints and seeds always yield byte-identical output.
CSV schemas are versioned; golden tests pin the headers.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import LabeledImage
from .kernels import DegenerateFeatureError
from .model import (
    BranchNetSpec,
    build_wrn16,
    count_flops,
    count_params,
    forward_exit,
    forward_stage,
)
from .policies import (
    DEFAULT_FEATURE_DIFF_THRESHOLDS,
    PolicyConfig,
    feature_diff,
    neighbor_similarity,
)
from .simulator import ClusterConfig, default_cluster, simulate_dataset
from .weights import WeightStore, fingerprint

CSV_SCHEMA_VERSION = 1

FLOPS_CONVENTION = ("MAC=1 (conv: out*in_ch*k^2, fc: in*out), +1/output for bias; "
                    "batchnorm, relu, shortcut-add 1/element; avg pools 1/output element")

# Reference figures for the two-student wrn16-1 seven-exit configuration,
# used for the deviation columns when the analyzed arch matches.
REFERENCE = {
    "arch": "wrn16-1",
    "exit_positions": (1, 4, 6, 9, 11, 14, 16),
    "backbone_mflops": (0.459, 4.817, 4.817, 7.356, 4.768, 7.28, 4.74),
    "exit_mflops": (0.067, 0.067, 0.067, 0.035, 0.035, 0.02, 0.02),
    "backbone_total_mflops": 34.26,
    "with_exits_total_mflops": 34.55,
    "backbone_params": 178540,
    "with_exits_params": 189044,
    "exit_params_overhead_pct": 5.88,
    "exit_flops_overhead_pct": 0.88,
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return repr(x)
    return "" if x is None else str(x)


def render_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def build_spec(arch: str = "wrn16-1", exit_positions: Optional[Sequence[int]] = None,
               class_count: int = 10, n_students: int = 2) -> BranchNetSpec:
    if not arch.startswith("wrn16-"):
        raise ValueError(f"unknown architecture {arch!r}; supported: wrn16-<width>")
    width = int(arch.split("-", 1)[1])
    positions = tuple(exit_positions) if exit_positions else REFERENCE["exit_positions"]
    return build_wrn16(width, positions, class_count, n_students)


def spec_from_metadata(metadata: dict) -> BranchNetSpec:
    arch = metadata.get("arch", {})
    return build_spec(arch.get("name", "wrn16-1"),
                      arch.get("exit_positions"),
                      int(arch.get("class_count", 10)),
                      int(arch.get("n_students", 2)))


def _is_reference_arch(spec: BranchNetSpec) -> bool:
    return (spec.arch == REFERENCE["arch"]
            and spec.exit_positions == REFERENCE["exit_positions"]
            and spec.class_count == 10)


def _dev_pct(value: float, ref: float) -> float:
    return 100.0 * (value / ref - 1.0)


# ---------------------------------------------------------------------------
# Static analysis (cost tables)


def flops_report(spec: BranchNetSpec) -> dict:
    costs = count_flops(spec)
    params = count_params(spec)
    is_ref = _is_reference_arch(spec)
    m = spec.num_exits

    branches = []
    for j in range(m):
        row = {
            "branch": f"E{j + 1}",
            "backbone_flops": costs.stage_flops[j],
            "backbone_mflops": costs.stage_flops[j] / 1e6,
            "exit_flops": costs.exit_flops[j],
            "exit_mflops": costs.exit_flops[j] / 1e6,
            "backbone_params": params.stage_params[j],
            "exit_params": params.exit_params[j],
        }
        if is_ref:
            row["ref_backbone_mflops"] = REFERENCE["backbone_mflops"][j]
            row["backbone_dev_pct"] = _dev_pct(row["backbone_mflops"],
                                               REFERENCE["backbone_mflops"][j])
            row["ref_exit_mflops"] = REFERENCE["exit_mflops"][j]
            row["exit_dev_pct"] = _dev_pct(row["exit_mflops"], REFERENCE["exit_mflops"][j])
        branches.append(row)

    totals = {
        "backbone_with_head_flops": costs.backbone_with_head,
        "backbone_with_head_mflops": costs.backbone_with_head / 1e6,
        "with_exits_and_head_flops": costs.with_exits_and_head,
        "with_exits_and_head_mflops": costs.with_exits_and_head / 1e6,
        "early_exits_flops": costs.early_exits_total,
        "exit_flops_overhead_pct": 100.0 * costs.early_exits_total / costs.backbone_with_head,
        "total_forward_final_flops": costs.total_forward_final,
        "total_forward_all_exits_flops": costs.total_forward_all_exits,
        "fusion_flops": costs.fusion_flops,
        "backbone_params": params.backbone,
        "with_exits_params": params.with_exits,
        "early_exit_params": params.early_exits_total,
        "exit_params_overhead_pct": params.exit_overhead_pct,
        "fusion_params": params.fusion_params,
    }
    if is_ref:
        totals["ref_backbone_total_mflops"] = REFERENCE["backbone_total_mflops"]
        totals["backbone_total_dev_pct"] = _dev_pct(
            totals["backbone_with_head_mflops"], REFERENCE["backbone_total_mflops"])
        totals["ref_with_exits_total_mflops"] = REFERENCE["with_exits_total_mflops"]
        totals["with_exits_total_dev_pct"] = _dev_pct(
            totals["with_exits_and_head_mflops"], REFERENCE["with_exits_total_mflops"])
        totals["ref_backbone_params"] = REFERENCE["backbone_params"]
        totals["backbone_params_dev_pct"] = _dev_pct(
            params.backbone, REFERENCE["backbone_params"])
        totals["ref_with_exits_params"] = REFERENCE["with_exits_params"]
        totals["with_exits_params_dev_pct"] = _dev_pct(
            params.with_exits, REFERENCE["with_exits_params"])
        totals["ref_exit_params_overhead_pct"] = REFERENCE["exit_params_overhead_pct"]

    config = {"arch": spec.arch, "exit_positions": list(spec.exit_positions),
              "class_count": spec.class_count, "n_students": spec.n_students}
    report = {
        "kind": "flops",
        "metadata": {
            "tool_version": __version__,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "flops_convention": FLOPS_CONVENTION,
            "config": config,
            "config_fingerprint": config_fingerprint(config),
            "spec_fingerprint": spec.fingerprint(),
        },
        "branches": branches,
        "totals": totals,
    }
    report["csv"] = {"flops.csv": flops_csv(report)}
    return report


FLOPS_CSV_HEADER = (
    "branch", "backbone_flops", "backbone_mflops", "ref_backbone_mflops", "backbone_dev_pct",
    "exit_flops", "exit_mflops", "ref_exit_mflops", "exit_dev_pct",
    "backbone_params", "exit_params",
)


def flops_csv(report: dict) -> str:
    rows = []
    for b in report["branches"]:
        rows.append([b.get(k) for k in FLOPS_CSV_HEADER])
    t = report["totals"]
    rows.append(["total_backbone", t["backbone_with_head_flops"],
                 t["backbone_with_head_mflops"], t.get("ref_backbone_total_mflops"),
                 t.get("backbone_total_dev_pct"), t["early_exits_flops"],
                 t["early_exits_flops"] / 1e6, None, None,
                 t["backbone_params"], t["early_exit_params"]])
    rows.append(["total_with_exits", t["with_exits_and_head_flops"],
                 t["with_exits_and_head_mflops"], t.get("ref_with_exits_total_mflops"),
                 t.get("with_exits_total_dev_pct"), None, None, None, None,
                 t["with_exits_params"], None])
    return render_csv(FLOPS_CSV_HEADER, rows)


# ---------------------------------------------------------------------------
# Policy benchmark


def _policy_notes(policy: PolicyConfig) -> list[str]:
    notes = []
    if (policy.kind == "feature_diff" and policy.strict_compare
            and policy.thresholds and policy.thresholds[0] <= 1.0):
        notes.append(
            f"{policy.kind}: strict compare with t_1={policy.thresholds[0]} makes exit 1 "
            "unreachable (the first boundary's self-difference is exactly 1.0)")
    return notes


def bench_report(spec: BranchNetSpec, weights: WeightStore, weight_bytes: bytes,
                 dataset: Sequence[LabeledImage], policies: Sequence[PolicyConfig],
                 cluster: Optional[ClusterConfig] = None, seed: int = 0,
                 repeats: int = 1, exit_eval: str = "all",
                 data_desc: Optional[dict] = None) -> dict:
    if not policies:
        raise ValueError("empty policy list")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cluster = cluster or default_cluster(spec.n_students, seed)
    costs = count_flops(spec)
    m = spec.num_exits
    n = spec.n_students

    rows = []
    notes: list[str] = []
    for policy in policies:
        policy.validated_for(m)
        notes.extend(_policy_notes(policy))
        acc, flops_v, mk, p50, p95, tr = [], [], [], [], [], []
        hist_acc = np.zeros((n, m), dtype=np.float64)
        for r in range(repeats):
            run_policy_cfg = PolicyConfig(policy.kind, policy.thresholds,
                                          policy.seed + r, policy.strict_compare)
            result = simulate_dataset(spec, weights, dataset, run_policy_cfg, cluster,
                                      exit_eval=exit_eval, flops=costs)
            acc.append(result.accuracy_pct)
            flops_v.append(result.mean_flops_per_student)
            mk.append(result.mean_makespan)
            p50.append(result.makespan_percentile(50))
            p95.append(result.makespan_percentile(95))
            tr.append(result.mean_transfer)
            hist_acc += np.asarray(result.exit_histogram(m), dtype=np.float64)
        hist = (hist_acc / repeats)
        row = {
            "policy": policy.kind,
            "policy_config": policy.to_dict(),
            "accuracy_pct": float(np.mean(acc)),
            "mean_flops": float(np.mean(flops_v)),
            "mean_mflops": float(np.mean(flops_v)) / 1e6,
            "mean_latency_ms": float(np.mean(mk)) * 1e3,
            "p50_latency_ms": float(np.mean(p50)) * 1e3,
            "p95_latency_ms": float(np.mean(p95)) * 1e3,
            "mean_transfer_ms": float(np.mean(tr)) * 1e3,
            "exit_histogram": [[float(v) for v in row_] for row_ in hist],
        }
        rows.append(row)

    config = {
        "arch": spec.arch,
        "exit_positions": list(spec.exit_positions),
        "class_count": spec.class_count,
        "n_students": n,
        "policies": [p.to_dict() for p in policies],
        "cluster": cluster.to_dict(),
        "seed": seed,
        "repeats": repeats,
        "exit_eval": exit_eval,
        "data": data_desc or {},
        "dataset_size": len(dataset),
    }
    report = {
        "kind": "bench",
        "metadata": {
            "tool_version": __version__,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "flops_convention": FLOPS_CONVENTION,
            "flops_accounting": ("every evaluated exit branch counted" if exit_eval == "all"
                                 else "only policy-required exit branches counted"),
            "latency_model": "simulated (analytic FLOPs/rate + transport); not wall-clock",
            "config": config,
            "config_fingerprint": config_fingerprint(config),
            "weights_fingerprint": fingerprint(weight_bytes),
            "seed": seed,
            "notes": notes,
        },
        "rows": rows,
    }
    report["csv"] = {"bench.csv": bench_csv(report, n, m)}
    return report


def bench_csv(report: dict, n_students: int, num_exits: int) -> str:
    header = ["policy", "accuracy_pct", "mean_flops", "mean_mflops", "mean_latency_ms",
              "p50_latency_ms", "p95_latency_ms", "mean_transfer_ms"]
    for i in range(n_students):
        for j in range(num_exits):
            header.append(f"hist_s{i}_e{j + 1}")
    rows = []
    for r in report["rows"]:
        row = [r["policy"], r["accuracy_pct"], r["mean_flops"], r["mean_mflops"],
               r["mean_latency_ms"], r["p50_latency_ms"], r["p95_latency_ms"],
               r["mean_transfer_ms"]]
        for i in range(n_students):
            row.extend(r["exit_histogram"][i])
        rows.append(row)
    return render_csv(header, rows)


# ---------------------------------------------------------------------------
# Measure curves


def curves_report(spec: BranchNetSpec, weights: WeightStore, weight_bytes: bytes,
                  dataset: Sequence[LabeledImage], seed: int = 0,
                  data_desc: Optional[dict] = None) -> dict:
    """Per-exit mean/std of the two confidence measures over a sample."""
    if not dataset:
        raise ValueError("empty dataset")
    m = spec.num_exits
    diffs = [[] for _ in range(m)]
    sims = [[] for _ in range(m)]  # sims[0] stays empty: no neighbor at exit 1
    for image in dataset:
        for i in range(spec.n_students):
            feats = []
            x = image.pixels
            for j in range(1, m + 1):
                x = forward_stage(spec, weights, i, j, x)
                feats.append(forward_exit(spec, weights, i, j, x))
            for j in range(m):
                try:
                    value = feature_diff(feats[j], feats[0])
                    # the first boundary compares a feature against itself
                    diffs[j].append(1.0 if j == 0 else value)
                except DegenerateFeatureError:
                    pass
                if j > 0:
                    try:
                        sims[j].append(neighbor_similarity(feats[j], feats[j - 1]))
                    except DegenerateFeatureError:
                        pass
    def stats(values):
        if not values:
            return None, None
        arr = np.asarray(values)
        return float(np.mean(arr)), float(np.std(arr))

    series = []
    for j in range(m):
        d_mean, d_std = stats(diffs[j])
        s_mean, s_std = stats(sims[j])
        series.append({
            "exit": j + 1,
            "feature_diff_mean": d_mean,
            "feature_diff_std": d_std,
            "neighbor_sim_mean": s_mean,
            "neighbor_sim_std": s_std,
            "samples": len(diffs[j]),
        })
    config = {"arch": spec.arch, "exit_positions": list(spec.exit_positions),
              "n_students": spec.n_students, "seed": seed,
              "data": data_desc or {}, "dataset_size": len(dataset)}
    report = {
        "kind": "curves",
        "metadata": {
            "tool_version": __version__,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "config": config,
            "config_fingerprint": config_fingerprint(config),
            "weights_fingerprint": fingerprint(weight_bytes),
            "seed": seed,
        },
        "series": series,
    }
    report["csv"] = {"curves.csv": curves_csv(report)}
    return report


CURVES_CSV_HEADER = ("exit", "feature_diff_mean", "feature_diff_std",
                     "neighbor_sim_mean", "neighbor_sim_std", "samples")


def curves_csv(report: dict) -> str:
    rows = [[s[k] for k in CURVES_CSV_HEADER] for s in report["series"]]
    return render_csv(CURVES_CSV_HEADER, rows)


# ---------------------------------------------------------------------------
# Threshold sweep


def sweep_report(spec: BranchNetSpec, weights: WeightStore, weight_bytes: bytes,
                 dataset: Sequence[LabeledImage], offsets: Sequence[float],
                 base_thresholds: Optional[Sequence[float]] = None,
                 cluster: Optional[ClusterConfig] = None, seed: int = 0,
                 strict: bool = True, exit_eval: str = "all",
                 data_desc: Optional[dict] = None) -> dict:
    """Accuracy/FLOPs trade-off of feature_diff under uniform threshold offsets."""
    if not list(offsets):
        raise ValueError("empty offset grid")
    base = tuple(base_thresholds) if base_thresholds else DEFAULT_FEATURE_DIFF_THRESHOLDS
    if len(base) != spec.num_exits:
        raise ValueError(f"{len(base)} base thresholds for {spec.num_exits} exits")
    cluster = cluster or default_cluster(spec.n_students, seed)
    costs = count_flops(spec)
    rows = []
    for off in offsets:
        shifted = tuple(t + off for t in base)
        policy = PolicyConfig("feature_diff", shifted, seed, strict)
        result = simulate_dataset(spec, weights, dataset, policy, cluster,
                                  exit_eval=exit_eval, flops=costs)
        mean_exit = float(np.mean([s.exit_index for t in result.traces
                                   for s in t.students]))
        rows.append({
            "offset": float(off),
            "accuracy_pct": result.accuracy_pct,
            "mean_flops": result.mean_flops_per_student,
            "mean_latency_ms": result.mean_makespan * 1e3,
            "mean_exit": mean_exit,
        })
    config = {"arch": spec.arch, "base_thresholds": list(base),
              "offsets": [float(o) for o in offsets], "strict": strict,
              "cluster": cluster.to_dict(), "seed": seed, "exit_eval": exit_eval,
              "data": data_desc or {}, "dataset_size": len(dataset)}
    report = {
        "kind": "sweep",
        "metadata": {
            "tool_version": __version__,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "flops_convention": FLOPS_CONVENTION,
            "config": config,
            "config_fingerprint": config_fingerprint(config),
            "weights_fingerprint": fingerprint(weight_bytes),
            "seed": seed,
        },
        "rows": rows,
    }
    report["csv"] = {"sweep.csv": sweep_csv(report)}
    return report


SWEEP_CSV_HEADER = ("offset", "accuracy_pct", "mean_flops", "mean_latency_ms", "mean_exit")


def sweep_csv(report: dict) -> str:
    rows = [[r[k] for k in SWEEP_CSV_HEADER] for r in report["rows"]]
    return render_csv(SWEEP_CSV_HEADER, rows)


# ---------------------------------------------------------------------------
# Weight inspection


def weights_info(store: WeightStore, data: bytes) -> dict:
    return {
        "kind": "weights_info",
        "fingerprint": fingerprint(data),
        "file_bytes": len(data),
        "tensor_count": len(store),
        "metadata": store.metadata,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in store.items()],
    }
