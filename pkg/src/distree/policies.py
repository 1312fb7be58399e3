"""Confidence measures and the incremental exit controller.

The controller walks exit boundaries in order. At each boundary j it sees
the exit feature F_j (and, for the entropy baseline, a probability
vector) and answers exit-or-continue; at the last boundary it always
exits. The feature-difference measure compares F_j against the first
exit's feature: diff(F_j, F_1) = ||F_j||*||F_1|| / (F_j . F_1), the
reciprocal of their cosine similarity, so larger means more differentiated
and more trustworthy.

Degenerate features (zero norm, non-positive dot product) are treated as
not confident: the controller records the event and continues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import DegenerateFeatureError, ShapeError, cosine_similarity, entropy, softmax
from .model import BranchNetSpec, count_flops, forward_exit, forward_stage

POLICY_KINDS = ("last_exit", "random", "neighbor_similarity", "feature_diff", "entropy")
THRESHOLD_KINDS = ("neighbor_similarity", "feature_diff", "entropy")

# Default threshold vectors for the seven-exit configuration.
DEFAULT_FEATURE_DIFF_THRESHOLDS = (1.0, 1.12, 1.14, 1.16, 1.18, 1.20, 1.22)
DEFAULT_SIMILARITY_THRESHOLDS = (0.97, 0.97, 0.97, 0.97, 0.97, 0.975, 0.98)


class ContractError(RuntimeError):
    """Controller stepped out of order."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    thresholds: Optional[tuple[float, ...]] = None
    seed: int = 0
    strict_compare: bool = True

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}, expected one of {POLICY_KINDS}")
        if self.thresholds is not None:
            values = tuple(float(t) for t in self.thresholds)
            if any(math.isnan(t) for t in values):
                raise ValueError("thresholds must not be NaN")
            object.__setattr__(self, "thresholds", values)

    def validated_for(self, num_exits: int) -> "PolicyConfig":
        if self.kind in THRESHOLD_KINDS:
            if self.thresholds is None:
                raise ValueError(f"{self.kind} policy requires a threshold vector")
            if len(self.thresholds) != num_exits:
                raise ValueError(f"{self.kind}: {len(self.thresholds)} thresholds "
                                 f"for {num_exits} exits")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        kind = d.get("policy", d.get("kind"))
        if kind is None:
            raise ValueError("policy config needs a 'policy' field")
        thresholds = d.get("thresholds")
        if thresholds is None and kind in THRESHOLD_KINDS:
            thresholds = (DEFAULT_FEATURE_DIFF_THRESHOLDS if kind == "feature_diff"
                          else DEFAULT_SIMILARITY_THRESHOLDS if kind == "neighbor_similarity"
                          else None)
        return cls(kind=kind,
                   thresholds=tuple(thresholds) if thresholds is not None else None,
                   seed=int(d.get("seed", 0)),
                   strict_compare=bool(d.get("strict", True)))

    def to_dict(self) -> dict:
        return {
            "policy": self.kind,
            "thresholds": list(self.thresholds) if self.thresholds is not None else None,
            "strict": self.strict_compare,
            "seed": self.seed,
        }


@dataclass
class ExitDecision:
    exit_index: int
    measure_values: list[float]
    exited_early: bool
    degenerate_events: int = 0


def feature_diff(f_j: np.ndarray, f_1: np.ndarray) -> float:
    """Relative feature difference, the reciprocal cosine similarity."""
    if f_j.shape != f_1.shape:
        raise ShapeError("feature_diff", f"shapes differ: {f_j.shape} vs {f_1.shape}")
    a = f_j.reshape(-1)
    b = f_1.reshape(-1)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateFeatureError("feature_diff: zero-norm operand")
    dot = float(np.dot(a, b))
    if dot <= 0.0:
        raise DegenerateFeatureError(f"feature_diff: non-positive dot product {dot}")
    return na * nb / dot


def neighbor_similarity(f_j: np.ndarray, f_prev: np.ndarray) -> float:
    return cosine_similarity(f_j, f_prev)


class ExitController:
    """Per-inference exit decision state; confined to one logical task.

    ``step`` consumes features; ``step_measure`` consumes a raw measure
    value and is the level the brute-force scan oracle drives. Neither
    latches an exit: each call answers "would the policy exit at j".
    """

    def __init__(self, config: PolicyConfig, num_exits: int):
        self.config = config.validated_for(num_exits)
        self.num_exits = num_exits
        self.measures: list[float] = []
        self.degenerate_events = 0
        self.exited_early = False
        self._next_j = 1
        self._f1: Optional[np.ndarray] = None
        self._prev: Optional[np.ndarray] = None
        self._drawn_exit: Optional[int] = None
        if config.kind == "random":
            rng = np.random.default_rng(config.seed)
            self._drawn_exit = int(rng.integers(1, num_exits + 1))

    @property
    def drawn_exit(self) -> Optional[int]:
        return self._drawn_exit

    def requires_feature(self, j: int) -> bool:
        """Whether the policy needs F_j to decide at boundary j."""
        if self.config.kind in THRESHOLD_KINDS:
            return True
        if self.config.kind == "random":
            return j >= self._drawn_exit or j == self.num_exits
        return j == self.num_exits  # last_exit

    def step(self, j: int, feature: Optional[np.ndarray] = None,
             probabilities: Optional[np.ndarray] = None) -> bool:
        """Advance to boundary j; True means exit here with F_j."""
        if j != self._next_j:
            raise ContractError(f"boundary {j} visited after {self._next_j - 1}; "
                                "exits must be stepped in increasing order")
        measure: Optional[float] = None
        kind = self.config.kind
        if kind == "feature_diff":
            if feature is None:
                raise ValueError("feature_diff policy needs the exit feature")
            if j == 1:
                self._f1 = feature
            try:
                measure = feature_diff(feature, self._f1 if self._f1 is not None else feature)
                if j == 1:
                    measure = 1.0  # self-difference; exact by definition, no rounding noise
            except DegenerateFeatureError:
                self.degenerate_events += 1
        elif kind == "neighbor_similarity":
            if feature is None:
                raise ValueError("neighbor_similarity policy needs the exit feature")
            if self._prev is not None:
                try:
                    measure = neighbor_similarity(feature, self._prev)
                except DegenerateFeatureError:
                    self.degenerate_events += 1
            self._prev = feature
        elif kind == "entropy":
            if probabilities is None:
                raise ValueError("entropy policy needs a probability vector")
            measure = entropy(probabilities)
        return self.step_measure(j, measure)

    def step_measure(self, j: int, measure: Optional[float] = None) -> bool:
        if j != self._next_j:
            raise ContractError(f"boundary {j} visited after {self._next_j - 1}; "
                                "exits must be stepped in increasing order")
        if j > self.num_exits:
            raise ContractError(f"boundary {j} beyond last exit {self.num_exits}")
        self._next_j += 1
        self.measures.append(math.nan if measure is None else float(measure))
        passed = self._test(j, measure)
        if j == self.num_exits:
            self.exited_early = passed
            return True
        self.exited_early = passed
        return passed

    def _test(self, j: int, measure: Optional[float]) -> bool:
        kind = self.config.kind
        if kind == "last_exit":
            return False
        if kind == "random":
            return j >= self._drawn_exit
        if measure is None:
            return False  # degenerate or undefined: not confident
        t = self.config.thresholds[j - 1]
        strict = self.config.strict_compare
        if kind == "entropy":
            return measure < t if strict else measure <= t
        if kind == "neighbor_similarity" and j == 1:
            return False  # no neighbor yet
        return measure > t if strict else measure >= t

    def decision(self, exit_index: int) -> ExitDecision:
        return ExitDecision(
            exit_index=exit_index,
            measure_values=list(self.measures),
            exited_early=self.exited_early or exit_index < self.num_exits,
            degenerate_events=self.degenerate_events,
        )


def first_crossing(measures, thresholds, kind: str = "feature_diff",
                   strict: bool = True) -> int:
    """One-shot scan: first boundary whose measure passes, else the last one.

    Mirrors the stepwise controller on a precomputed measure sequence;
    kept as an independent reference for equivalence checks and sweeps.
    """
    m = len(measures)
    for j in range(1, m + 1):
        v = measures[j - 1]
        if v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        t = thresholds[j - 1]
        if kind == "entropy":
            hit = v < t if strict else v <= t
        elif kind == "neighbor_similarity" and j == 1:
            hit = False
        else:
            hit = v > t if strict else v >= t
        if hit:
            return j
    return m


def student_probabilities(spec: BranchNetSpec, weights, student_id: int,
                          feature: np.ndarray) -> np.ndarray:
    """Auxiliary softmax for one student: its slice of the fusion head.

    The shared fusion weight matrix is (classes, N*feature_dim); a single
    student's block plus the shared bias gives a usable per-student
    confidence proxy for the entropy baseline.
    """
    w = weights["fusion.fc.weight"]
    lo = student_id * spec.feature_dim
    logits = w[:, lo:lo + spec.feature_dim] @ feature + weights["fusion.fc.bias"]
    return softmax(logits.astype(np.float32))


AUX_HEAD = "aux"


def run_policy(spec: BranchNetSpec, weights, student_id: int, x: np.ndarray,
               config: PolicyConfig, exit_eval: str = "all",
               flops=None, seed: Optional[int] = None):
    """Drive one student through its stages under an exit policy.

    Returns (ExitDecision, exit feature, flops_used). ``exit_eval`` picks
    the accounting/evaluation mode: "all" computes every visited boundary's
    exit branch (the controller needs F_j anyway for measure policies);
    "needed" computes exits only where the policy requires them.
    """
    if exit_eval not in ("all", "needed"):
        raise ValueError(f"exit_eval must be 'all' or 'needed', got {exit_eval!r}")
    cfg = config if seed is None else PolicyConfig(
        config.kind, config.thresholds, seed, config.strict_compare)
    controller = ExitController(cfg, spec.num_exits)
    costs = flops if flops is not None else count_flops(spec)
    aux_flops = spec.feature_dim * spec.class_count + spec.class_count
    used = 0
    for j in range(1, spec.num_exits + 1):
        x = forward_stage(spec, weights, student_id, j, x)
        used += costs.stage_flops[j - 1]
        feature = None
        probs = None
        if exit_eval == "all" or controller.requires_feature(j):
            feature = forward_exit(spec, weights, student_id, j, x)
            used += costs.exit_flops[j - 1]
            if cfg.kind == "entropy":
                probs = student_probabilities(spec, weights, student_id, feature)
                used += aux_flops
        if controller.step(j, feature, probs):
            if feature is None:  # possible only at j == num_exits in "needed" mode
                feature = forward_exit(spec, weights, student_id, j, x)
                used += costs.exit_flops[j - 1]
            return controller.decision(j), feature, used
    raise AssertionError("controller failed to exit at the last boundary")
