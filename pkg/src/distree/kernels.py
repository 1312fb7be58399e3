"""Dense float32 tensors and forward-only layer kernels.

All values are plain numpy float32 arrays in channels-first layout
(C,H,W for feature maps). Every kernel is a pure function of its inputs:
nothing is mutated, no hidden state, so tensors can be shared between
concurrent workers freely.

The FLOPs cost model used throughout the project lives here too, in
``flops_of_layer``. Convention (documented in every report):

* one multiply-accumulate counts as 1 FLOP (conv: out_elems*in_ch*k^2,
  fully connected: in_dim*out_dim), plus one per output element for bias,
* batchnorm, ReLU and shortcut adds count 1 FLOP per element,
* average pooling (windowed or global) counts 1 FLOP per output element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

DTYPE = np.float32
MAX_RANK = 4


class ShapeError(ValueError):
    """Shape mismatch, naming the layer and the offending dimensions."""

    def __init__(self, layer: str, detail: str):
        super().__init__(f"{layer}: {detail}")
        self.layer = layer
        self.detail = detail


class DegenerateFeatureError(ValueError):
    """Zero-norm operand or non-positive dot product in a similarity measure."""


class InvalidParameterError(ValueError):
    """Layer parameters that cannot come from a healthy checkpoint."""


def tensor(data, shape: Optional[Iterable[int]] = None) -> np.ndarray:
    """Build a validated float32 tensor (rank 1..4, row-major)."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    check_tensor(arr)
    return np.ascontiguousarray(arr)


def check_tensor(arr: np.ndarray, rank: Optional[int] = None, ctx: str = "tensor") -> None:
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ShapeError(ctx, f"rank {arr.ndim} outside 1..{MAX_RANK}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(ctx, f"non-positive dimension in shape {arr.shape}")
    if rank is not None and arr.ndim != rank:
        raise ShapeError(ctx, f"expected rank {rank}, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    name: str
    ch: int
    eps: float = 1e-5


@dataclass(frozen=True)
class Relu:
    name: str


@dataclass(frozen=True)
class AvgPool:
    name: str
    kernel: int
    stride: int


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str


@dataclass(frozen=True)
class Fc:
    name: str
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class AddShortcut:
    """Adds the enclosing cell's input back onto the running activation.

    When ``projection`` is set, the cell input goes through that 1x1
    convolution first (weights live under ``<scope>.<projection.name>``).
    """

    name: str
    projection: Optional[Conv2d] = None


LayerSpec = Union[Conv2d, BatchNorm, Relu, AvgPool, GlobalAvgPool, Fc, AddShortcut]


def output_shape_of(spec: LayerSpec, input_shape: tuple) -> tuple:
    """Shape transfer function for a layer. Raises ShapeError on mismatch."""
    if isinstance(spec, Conv2d):
        if len(input_shape) != 3:
            raise ShapeError(spec.name, f"conv2d needs C,H,W input, got {input_shape}")
        c, h, w = input_shape
        if c != spec.in_ch:
            raise ShapeError(spec.name, f"expected {spec.in_ch} input channels, got {c}")
        oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(spec.name, f"kernel {spec.kernel} too large for input {input_shape}")
        return (spec.out_ch, oh, ow)
    if isinstance(spec, BatchNorm):
        if input_shape[0] != spec.ch:
            raise ShapeError(spec.name, f"expected {spec.ch} channels, got {input_shape[0]}")
        return input_shape
    if isinstance(spec, Relu):
        return input_shape
    if isinstance(spec, AvgPool):
        if len(input_shape) != 3:
            raise ShapeError(spec.name, f"avgpool needs C,H,W input, got {input_shape}")
        c, h, w = input_shape
        if h < spec.kernel or w < spec.kernel:
            raise ShapeError(spec.name, f"window {spec.kernel} too large for input {input_shape}")
        return (c, (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1)
    if isinstance(spec, GlobalAvgPool):
        if len(input_shape) != 3:
            raise ShapeError(spec.name, f"global pool needs C,H,W input, got {input_shape}")
        return (input_shape[0],)
    if isinstance(spec, Fc):
        if input_shape != (spec.in_dim,):
            raise ShapeError(spec.name, f"expected input ({spec.in_dim},), got {input_shape}")
        return (spec.out_dim,)
    if isinstance(spec, AddShortcut):
        if spec.projection is not None and spec.projection.out_ch != input_shape[0]:
            raise ShapeError(spec.name, f"projection emits {spec.projection.out_ch} channels, "
                                        f"running activation has {input_shape[0]}")
        return input_shape
    raise TypeError(f"unknown layer spec {type(spec)!r}")


def flops_of_layer(spec: LayerSpec, input_shape: tuple) -> int:
    """FLOPs of one layer application under the documented convention."""
    out_shape = output_shape_of(spec, input_shape)
    out_elems = int(np.prod(out_shape))
    if isinstance(spec, Conv2d):
        macs = out_elems * spec.in_ch * spec.kernel * spec.kernel
        return macs + (out_elems if spec.bias else 0)
    if isinstance(spec, (BatchNorm, Relu)):
        return int(np.prod(input_shape))
    if isinstance(spec, (AvgPool, GlobalAvgPool)):
        return out_elems
    if isinstance(spec, Fc):
        return spec.in_dim * spec.out_dim + (spec.out_dim if spec.bias else 0)
    if isinstance(spec, AddShortcut):
        cost = out_elems
        if spec.projection is not None:
            p = spec.projection
            # The projection runs on the cell input; its output must match the
            # running activation, so its cost derives from the output side.
            cost += out_elems * p.in_ch * p.kernel * p.kernel
            cost += out_elems if p.bias else 0
        return cost
    raise TypeError(f"unknown layer spec {type(spec)!r}")


# ---------------------------------------------------------------------------
# Forward kernels


def conv2d_forward(x: np.ndarray, spec: Conv2d, weight: np.ndarray,
                   bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Direct 2-D convolution (exact sums, accumulated per kernel offset)."""
    check_tensor(x, rank=3, ctx=spec.name)
    out_shape = output_shape_of(spec, x.shape)
    expect_w = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
    if weight.shape != expect_w:
        raise ShapeError(spec.name, f"weight shape {weight.shape}, expected {expect_w}")
    if spec.bias:
        if bias is None or bias.shape != (spec.out_ch,):
            raise ShapeError(spec.name, f"bias shape {None if bias is None else bias.shape}, "
                                        f"expected ({spec.out_ch},)")
    xp = x
    if spec.pad:
        xp = np.pad(x, ((0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad)))
    out = np.zeros(out_shape, dtype=DTYPE)
    _, oh, ow = out_shape
    s = spec.stride
    for di in range(spec.kernel):
        for dj in range(spec.kernel):
            view = xp[:, di:di + s * oh:s, dj:dj + s * ow:s]
            out += np.tensordot(weight[:, :, di, dj], view, axes=([1], [0]))
    if spec.bias:
        out += bias[:, None, None]
    return out.astype(DTYPE, copy=False)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      eps: float = 1e-5, name: str = "batchnorm") -> np.ndarray:
    """Inference-mode batch normalization over the channel axis."""
    ch = x.shape[0]
    for p, pname in ((gamma, "gamma"), (beta, "beta"),
                     (running_mean, "running_mean"), (running_var, "running_var")):
        if p.shape != (ch,):
            raise ShapeError(name, f"{pname} shape {p.shape}, expected ({ch},)")
    denom = running_var + DTYPE(eps)
    if np.any(denom <= 0):
        raise InvalidParameterError(f"{name}: non-positive variance + epsilon (corrupt weights)")
    scale = gamma / np.sqrt(denom)
    shift = beta - running_mean * scale
    expand = (slice(None),) + (None,) * (x.ndim - 1)
    return (x * scale[expand] + shift[expand]).astype(DTYPE, copy=False)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def avgpool_forward(x: np.ndarray, kernel: int, stride: int, name: str = "avgpool") -> np.ndarray:
    check_tensor(x, rank=3, ctx=name)
    out_shape = output_shape_of(AvgPool(name, kernel, stride), x.shape)
    _, oh, ow = out_shape
    acc = np.zeros(out_shape, dtype=DTYPE)
    for di in range(kernel):
        for dj in range(kernel):
            acc += x[:, di:di + stride * oh:stride, dj:dj + stride * ow:stride]
    return (acc / DTYPE(kernel * kernel)).astype(DTYPE, copy=False)


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    check_tensor(x, rank=3, ctx="global_avgpool")
    return x.mean(axis=(1, 2), dtype=DTYPE)


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
               name: str = "fc") -> np.ndarray:
    check_tensor(x, rank=1, ctx=name)
    if weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(name, f"weight shape {weight.shape} incompatible with input {x.shape}")
    out = weight @ x
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(name, f"bias shape {bias.shape}, expected ({weight.shape[0]},)")
        out = out + bias
    return out.astype(DTYPE, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max subtraction) over a rank-1 tensor."""
    check_tensor(logits, rank=1, ctx="softmax")
    z = logits - logits.max()
    e = np.exp(z, dtype=DTYPE)
    return (e / e.sum(dtype=DTYPE)).astype(DTYPE, copy=False)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity over the flattened tensors, in [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", f"shapes differ: {a.shape} vs {b.shape}")
    af = a.reshape(-1)
    bf = b.reshape(-1)
    na = float(np.linalg.norm(af))
    nb = float(np.linalg.norm(bf))
    if na == 0.0 or nb == 0.0:
        raise DegenerateFeatureError("cosine_similarity: zero-norm operand")
    return float(np.dot(af, bf)) / (na * nb)


def entropy(probabilities: np.ndarray) -> float:
    """Shannon entropy (natural log) of a probability vector, with 0*log0 = 0."""
    check_tensor(probabilities, rank=1, ctx="entropy")
    p = probabilities.astype(np.float64, copy=False)
    if np.any(p < 0):
        raise ValueError("entropy: negative probability entry")
    total = float(p.sum())
    if not math.isclose(total, 1.0, abs_tol=1e-5):
        raise ValueError(f"entropy: probabilities sum to {total}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
