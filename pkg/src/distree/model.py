"""Multi-branch network graphs and their execution.

A BranchNetSpec is the single source of truth for forward execution,
FLOPs and parameter accounting. The backbone is broken into M stages,
one per exit boundary; exit branch j turns the boundary activation into
a feature vector of the common shape, and the fusion head maps the
concatenation of all students' features to class logits.

Stages are tuples of cells. A cell is a flat layer sequence; a trailing
AddShortcut layer adds the cell input back (through its projection when
shapes change), which is how residual blocks are expressed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .kernels import (
    AddShortcut,
    AvgPool,
    BatchNorm,
    Conv2d,
    Fc,
    GlobalAvgPool,
    LayerSpec,
    Relu,
    ShapeError,
    avgpool_forward,
    batchnorm_forward,
    check_tensor,
    conv2d_forward,
    fc_forward,
    flops_of_layer,
    global_avgpool_forward,
    output_shape_of,
    relu_forward,
)


class MissingWeightError(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"missing weight tensor {self.name!r}"


@dataclass(frozen=True)
class Cell:
    name: str
    layers: tuple[LayerSpec, ...]


Stage = tuple[Cell, ...]


@dataclass(frozen=True)
class BranchNetSpec:
    stages: tuple[Stage, ...]
    exits: tuple[Cell, ...]
    fusion: Fc
    exit_positions: tuple[int, ...]
    class_count: int
    n_students: int
    feature_dim: int
    input_shape: tuple[int, ...] = (3, 32, 32)
    arch: str = "custom"

    @property
    def num_exits(self) -> int:
        return len(self.exits)

    def describe(self) -> dict:
        """Structural description, stable across processes (fingerprint input)."""
        def layer_desc(layer):
            d = {"kind": type(layer).__name__, **{k: v for k, v in vars(layer).items()}}
            if isinstance(layer, AddShortcut) and layer.projection is not None:
                d["projection"] = layer_desc(layer.projection)
            return d

        def cell_desc(cell):
            return {"name": cell.name, "layers": [layer_desc(l) for l in cell.layers]}

        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "exit_positions": list(self.exit_positions),
            "class_count": self.class_count,
            "n_students": self.n_students,
            "feature_dim": self.feature_dim,
            "stages": [[cell_desc(c) for c in stage] for stage in self.stages],
            "exits": [cell_desc(c) for c in self.exits],
            "fusion": layer_desc(self.fusion),
        }

    def fingerprint(self) -> str:
        payload = json.dumps(self.describe(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Shape chaining and validation


def _cell_output_shape(cell: Cell, input_shape: tuple) -> tuple:
    shape = input_shape
    for layer in cell.layers:
        if isinstance(layer, AddShortcut) and layer.projection is not None:
            proj_out = output_shape_of(layer.projection, input_shape)
            if proj_out != shape:
                raise ShapeError(layer.name, f"projection output {proj_out} does not match "
                                             f"running activation {shape}")
        shape = output_shape_of(layer, shape)
    return shape


def stage_input_shapes(spec: BranchNetSpec) -> list[tuple]:
    """Input shape of each stage (index 0 = network input)."""
    shapes = [tuple(spec.input_shape)]
    for stage in spec.stages:
        shape = shapes[-1]
        for cell in stage:
            shape = _cell_output_shape(cell, shape)
        shapes.append(shape)
    return shapes


def validate_spec(spec: BranchNetSpec) -> None:
    """Chain every shape through the graph; raise ShapeError on inconsistency."""
    if spec.num_exits < 1 or len(spec.stages) != spec.num_exits:
        raise ShapeError("spec", f"{len(spec.stages)} stages vs {spec.num_exits} exits; "
                                 "need one exit per stage, at least one")
    if list(spec.exit_positions) != sorted(set(spec.exit_positions)):
        raise ShapeError("spec", f"exit positions {spec.exit_positions} not strictly increasing")
    shapes = stage_input_shapes(spec)
    feature_shapes = []
    for j, exit_cell in enumerate(spec.exits):
        feature_shapes.append(_cell_output_shape(exit_cell, shapes[j + 1]))
    if len(set(feature_shapes)) != 1:
        raise ShapeError("spec", f"exit feature shapes differ: {feature_shapes}")
    if feature_shapes[0] != (spec.feature_dim,):
        raise ShapeError("spec", f"exit features {feature_shapes[0]}, "
                                 f"expected ({spec.feature_dim},)")
    expected_in = spec.n_students * spec.feature_dim
    if spec.fusion.in_dim != expected_in:
        raise ShapeError(spec.fusion.name, f"fusion input {spec.fusion.in_dim}, "
                                           f"expected {expected_in}")
    if spec.fusion.out_dim != spec.class_count:
        raise ShapeError(spec.fusion.name, f"fusion emits {spec.fusion.out_dim} logits "
                                           f"for {spec.class_count} classes")


# ---------------------------------------------------------------------------
# Execution


def _layer_forward(layer: LayerSpec, weights, scope: str, x: np.ndarray) -> np.ndarray:
    def w(param):
        key = f"{scope}.{layer.name}.{param}"
        try:
            return weights[key]
        except KeyError:
            raise MissingWeightError(key) from None

    if isinstance(layer, Conv2d):
        return conv2d_forward(x, layer, w("weight"), w("bias") if layer.bias else None)
    if isinstance(layer, BatchNorm):
        return batchnorm_forward(x, w("gamma"), w("beta"), w("running_mean"),
                                 w("running_var"), eps=layer.eps, name=layer.name)
    if isinstance(layer, Relu):
        return relu_forward(x)
    if isinstance(layer, AvgPool):
        return avgpool_forward(x, layer.kernel, layer.stride, name=layer.name)
    if isinstance(layer, GlobalAvgPool):
        return global_avgpool_forward(x)
    if isinstance(layer, Fc):
        return fc_forward(x, w("weight"), w("bias") if layer.bias else None, name=layer.name)
    raise TypeError(f"unknown layer spec {type(layer)!r}")


def _cell_forward(cell: Cell, weights, scope: str, x: np.ndarray) -> np.ndarray:
    x0 = x
    for layer in cell.layers:
        if isinstance(layer, AddShortcut):
            if layer.projection is None:
                shortcut = x0
            else:
                p = layer.projection
                key = f"{scope}.{p.name}"
                shortcut = conv2d_forward(
                    x0, p, _fetch(weights, key + ".weight"),
                    _fetch(weights, key + ".bias") if p.bias else None)
            if shortcut.shape != x.shape:
                raise ShapeError(layer.name, f"shortcut shape {shortcut.shape} vs "
                                             f"activation {x.shape}")
            x = x + shortcut
        else:
            x = _layer_forward(layer, weights, scope, x)
    return x


def _fetch(weights, key: str) -> np.ndarray:
    try:
        return weights[key]
    except KeyError:
        raise MissingWeightError(key) from None


def forward_stage(spec: BranchNetSpec, weights, student_id: int, stage_index: int,
                  x: np.ndarray) -> np.ndarray:
    """Run backbone stage ``stage_index`` (1-based) for one student."""
    if not 1 <= stage_index <= len(spec.stages):
        raise IndexError(f"stage_index {stage_index} outside 1..{len(spec.stages)}")
    check_tensor(x, ctx=f"stage{stage_index} input")
    scope = f"s{student_id}.stage{stage_index}"
    for cell in spec.stages[stage_index - 1]:
        x = _cell_forward(cell, weights, scope, x)
    return x


def forward_exit(spec: BranchNetSpec, weights, student_id: int, exit_index: int,
                 stage_output: np.ndarray) -> np.ndarray:
    """Run exit branch ``exit_index`` (1-based) on its boundary activation."""
    if not 1 <= exit_index <= spec.num_exits:
        raise IndexError(f"exit_index {exit_index} outside 1..{spec.num_exits}")
    scope = f"s{student_id}.exit{exit_index}"
    return _cell_forward(spec.exits[exit_index - 1], weights, scope, stage_output)


def forward_to_exit(spec: BranchNetSpec, weights, student_id: int, exit_index: int,
                    x: np.ndarray) -> np.ndarray:
    """Stages 1..exit_index composed with the exit branch."""
    for j in range(1, exit_index + 1):
        x = forward_stage(spec, weights, student_id, j, x)
    return forward_exit(spec, weights, student_id, exit_index, x)


def fusion_forward(spec: BranchNetSpec, weights, features: Sequence[np.ndarray]) -> np.ndarray:
    """Class logits from the N students' exit features."""
    if len(features) != spec.n_students:
        raise ShapeError(spec.fusion.name, f"{len(features)} features for "
                                           f"{spec.n_students} students")
    for f in features:
        if f.shape != (spec.feature_dim,):
            raise ShapeError(spec.fusion.name, f"feature shape {f.shape}, "
                                               f"expected ({spec.feature_dim},)")
    stacked = np.concatenate([np.asarray(f) for f in features])
    bias = _fetch(weights, "fusion.fc.bias") if spec.fusion.bias else None
    return fc_forward(stacked, _fetch(weights, "fusion.fc.weight"), bias, name="fusion.fc")


# ---------------------------------------------------------------------------
# Parameter enumeration


def _layer_params(layer: LayerSpec) -> Iterator[tuple[str, tuple[int, ...]]]:
    if isinstance(layer, Conv2d):
        yield f"{layer.name}.weight", (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        if layer.bias:
            yield f"{layer.name}.bias", (layer.out_ch,)
    elif isinstance(layer, BatchNorm):
        for p in ("gamma", "beta", "running_mean", "running_var"):
            yield f"{layer.name}.{p}", (layer.ch,)
    elif isinstance(layer, Fc):
        yield f"{layer.name}.weight", (layer.out_dim, layer.in_dim)
        if layer.bias:
            yield f"{layer.name}.bias", (layer.out_dim,)
    elif isinstance(layer, AddShortcut) and layer.projection is not None:
        yield from _layer_params(layer.projection)


def param_entries(spec: BranchNetSpec) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Every (weight name, shape) the spec demands, in execution order."""
    for i in range(spec.n_students):
        for j, stage in enumerate(spec.stages, start=1):
            for cell in stage:
                for name, shape in ((n, s) for layer in cell.layers
                                    for n, s in _layer_params(layer)):
                    yield f"s{i}.stage{j}.{name}", shape
        for j, exit_cell in enumerate(spec.exits, start=1):
            for layer in exit_cell.layers:
                for name, shape in _layer_params(layer):
                    yield f"s{i}.exit{j}.{name}", shape
    for name, shape in _layer_params(spec.fusion):
        yield f"fusion.{name}", shape


def _learnable_count(layer: LayerSpec) -> int:
    if isinstance(layer, Conv2d):
        n = layer.out_ch * layer.in_ch * layer.kernel * layer.kernel
        return n + (layer.out_ch if layer.bias else 0)
    if isinstance(layer, BatchNorm):
        return 2 * layer.ch  # gamma + beta; running stats are not learnable
    if isinstance(layer, Fc):
        return layer.in_dim * layer.out_dim + (layer.out_dim if layer.bias else 0)
    if isinstance(layer, AddShortcut) and layer.projection is not None:
        return _learnable_count(layer.projection)
    return 0


# ---------------------------------------------------------------------------
# Static accounting


@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-branch FLOPs for a single student, plus derived totals.

    ``backbone_with_head`` adds the final exit stack and a standalone
    classifier (feature_dim -> class_count) to the stage total, which is
    what a plain single-exit backbone would cost end to end.
    """

    stage_flops: tuple[int, ...]
    exit_flops: tuple[int, ...]
    head_flops: int
    fusion_flops: int

    @property
    def stages_total(self) -> int:
        return sum(self.stage_flops)

    @property
    def early_exits_total(self) -> int:
        return sum(self.exit_flops[:-1])

    @property
    def backbone_with_head(self) -> int:
        return self.stages_total + self.exit_flops[-1] + self.head_flops

    @property
    def with_exits_and_head(self) -> int:
        return self.backbone_with_head + self.early_exits_total

    @property
    def total_forward_final(self) -> int:
        """Full forward to the last exit feature (no early exits evaluated)."""
        return self.stages_total + self.exit_flops[-1]

    @property
    def total_forward_all_exits(self) -> int:
        """Full forward evaluating every exit branch along the way."""
        return self.stages_total + sum(self.exit_flops)

    def cumulative(self, exit_index: int, evaluate_all: bool = True) -> int:
        """FLOPs to reach and take exit ``exit_index`` (1-based)."""
        total = sum(self.stage_flops[:exit_index])
        if evaluate_all:
            total += sum(self.exit_flops[:exit_index])
        else:
            total += self.exit_flops[exit_index - 1]
        return total


@dataclass(frozen=True)
class ParamsBreakdown:
    stage_params: tuple[int, ...]
    exit_params: tuple[int, ...]
    head_params: int
    fusion_params: int

    @property
    def backbone(self) -> int:
        return sum(self.stage_params) + self.exit_params[-1] + self.head_params

    @property
    def early_exits_total(self) -> int:
        return sum(self.exit_params[:-1])

    @property
    def with_exits(self) -> int:
        return self.backbone + self.early_exits_total

    @property
    def exit_overhead_pct(self) -> float:
        return 100.0 * self.early_exits_total / self.backbone


def _cell_flops(cell: Cell, input_shape: tuple) -> tuple[int, tuple]:
    total = 0
    shape = input_shape
    for layer in cell.layers:
        total += flops_of_layer(layer, shape)
        shape = output_shape_of(layer, shape)
    return total, shape


def count_flops(spec: BranchNetSpec) -> FlopsBreakdown:
    """Static per-branch FLOPs; depends only on the spec, never on weights."""
    shapes = stage_input_shapes(spec)
    stage_flops = []
    for j, stage in enumerate(spec.stages):
        shape = shapes[j]
        total = 0
        for cell in stage:
            cost, shape = _cell_flops(cell, shape)
            total += cost
        stage_flops.append(total)
    exit_flops = [
        _cell_flops(exit_cell, shapes[j + 1])[0]
        for j, exit_cell in enumerate(spec.exits)
    ]
    head = spec.feature_dim * spec.class_count + spec.class_count
    fusion = flops_of_layer(spec.fusion, (spec.fusion.in_dim,))
    return FlopsBreakdown(tuple(stage_flops), tuple(exit_flops), head, fusion)


def count_params(spec: BranchNetSpec) -> ParamsBreakdown:
    """Learnable parameter counts per branch, for a single student."""
    stage_params = tuple(
        sum(_learnable_count(l) for cell in stage for l in cell.layers)
        for stage in spec.stages
    )
    exit_params = tuple(
        sum(_learnable_count(l) for l in cell.layers) for cell in spec.exits
    )
    head = spec.feature_dim * spec.class_count + spec.class_count
    fusion = _learnable_count(spec.fusion)
    return ParamsBreakdown(stage_params, exit_params, head, fusion)


# ---------------------------------------------------------------------------
# WideResNet-16 constructor

# Exit boundaries are numbered by convolution count in the generic 16-conv
# topology (stem, then six blocks counting 3-2-3-2-3-2 convolutions: each
# group's first block carries a projection slot). Boundaries fall on block
# edges only, since shortcut connections forbid splitting a block.
WRN16_BOUNDARIES = (1, 4, 6, 9, 11, 14, 16)
PAPER_EXIT_POSITIONS = WRN16_BOUNDARIES
FINAL_SPATIAL = 8  # 32x32 input after two stride-2 groups


def _basic_block(in_ch: int, out_ch: int, stride: int) -> Cell:
    # Pre-activation ordering; the stride sits on the second 3x3 conv, and the
    # shortcut projects with a 1x1 conv whenever shape or stride changes.
    projection = None
    if stride != 1 or in_ch != out_ch:
        projection = Conv2d("proj", in_ch, out_ch, 1, stride, 0)
    return Cell("block", (
        BatchNorm("bn1", in_ch),
        Relu("relu1"),
        Conv2d("conv1", in_ch, out_ch, 3, 1, 1),
        BatchNorm("bn2", out_ch),
        Relu("relu2"),
        Conv2d("conv2", out_ch, out_ch, 3, stride, 1),
        AddShortcut("add", projection),
    ))


def _prefix_cell(cell: Cell, prefix: str) -> Cell:
    renamed = []
    for layer in cell.layers:
        if isinstance(layer, AddShortcut):
            proj = layer.projection
            if proj is not None:
                proj = replace(proj, name=f"{prefix}{proj.name}")
            renamed.append(AddShortcut(f"{prefix}{layer.name}", proj))
        else:
            renamed.append(replace(layer, name=f"{prefix}{layer.name}"))
    return Cell(cell.name, tuple(renamed))


def build_wrn16(width_multiplier: int, exit_positions: Sequence[int] = PAPER_EXIT_POSITIONS,
                class_count: int = 10, n_students: int = 1) -> BranchNetSpec:
    """WideResNet-16xk with exit branches at the requested block boundaries.

    ``exit_positions`` uses the conv-layer numbering of the 16-conv topology;
    valid boundaries are 1 (after the stem) and 4, 6, 9, 11, 14, 16 (after
    each basic block). The last position must be 16: the final exit is the
    backbone's own head (batchnorm, ReLU, global pool).
    """
    if width_multiplier < 1:
        raise ValueError(f"width_multiplier must be >= 1, got {width_multiplier}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if n_students < 1:
        raise ValueError(f"n_students must be >= 1, got {n_students}")
    positions = tuple(int(p) for p in exit_positions)
    bad = [p for p in positions if p not in WRN16_BOUNDARIES]
    if bad or not positions or list(positions) != sorted(set(positions)) or positions[-1] != 16:
        raise ValueError(
            f"invalid exit positions {list(positions)}: boundaries must be strictly "
            f"increasing values from {list(WRN16_BOUNDARIES)} and end at 16")

    k = width_multiplier
    widths = (16, 16 * k, 32 * k, 64 * k)
    feature_dim = 64 * k

    cells = [Cell("stem", (Conv2d("conv", 3, widths[0], 3, 1, 1),))]
    ch = widths[0]
    for group, (out_ch, stride) in enumerate(
            ((widths[1], 1), (widths[2], 2), (widths[3], 2)), start=1):
        for unit in (1, 2):
            cells.append(_basic_block(ch, out_ch, stride if unit == 1 else 1))
            ch = out_ch

    # Split the cell list into stages at the chosen boundaries.
    chosen = [WRN16_BOUNDARIES.index(p) for p in positions]
    stages: list[Stage] = []
    start = 0
    for idx in chosen:
        group_cells = cells[start:idx + 1]
        if len(group_cells) > 1:
            group_cells = [_prefix_cell(c, f"u{n}.") for n, c in enumerate(group_cells, start=1)]
        stages.append(tuple(group_cells))
        start = idx + 1

    # Boundary activation shapes, to size each exit branch.
    shape = (3, 32, 32)
    boundary_shapes = []
    for cell in cells:
        shape = _cell_output_shape(cell, shape)
        boundary_shapes.append(shape)
    exit_shapes = [boundary_shapes[i] for i in chosen]

    exits = []
    for shape in exit_shapes[:-1]:
        c, h, _ = shape
        layers: list[LayerSpec] = []
        if h > FINAL_SPATIAL:
            if h % FINAL_SPATIAL:
                raise ValueError(f"boundary spatial size {h} not reducible to {FINAL_SPATIAL}")
            kpool = h // FINAL_SPATIAL
            layers.append(AvgPool("pool", kpool, kpool))
        layers += [Conv2d("conv", c, feature_dim, 1, 1, 0), Relu("relu"), GlobalAvgPool("gap")]
        exits.append(Cell("exit", tuple(layers)))
    exits.append(Cell("exit", (BatchNorm("bn", feature_dim), Relu("relu"), GlobalAvgPool("gap"))))

    spec = BranchNetSpec(
        stages=tuple(stages),
        exits=tuple(exits),
        fusion=Fc("fc", n_students * feature_dim, class_count),
        exit_positions=positions,
        class_count=class_count,
        n_students=n_students,
        feature_dim=feature_dim,
        input_shape=(3, 32, 32),
        arch=f"wrn16-{k}",
    )
    validate_spec(spec)
    return spec
