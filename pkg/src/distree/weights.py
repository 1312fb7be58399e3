"""Named-tensor container and the portable binary weight format.

File layout (little-endian), shared with the training pipeline:

    magic "DEEW" (4 bytes)
    format version        u32
    metadata length       u32, then UTF-8 JSON metadata
    tensor count          u32
    per tensor:
        name length       u16, then UTF-8 name
        rank              u8
        dims              u32 each
        data              raw float32, row-major

Round-trips are bit-exact, including NaN payloads: tensor data is copied
as raw bytes, never through float parsing. Metadata is serialized
canonically (sorted keys, compact separators) so equal stores produce
equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterator, Optional

import numpy as np

from .kernels import DTYPE, MAX_RANK
from .model import BranchNetSpec, param_entries

MAGIC = b"DEEW"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Base class for malformed weight files."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


class WeightValidationError(ValueError):
    """Store does not satisfy a spec's parameter demands."""


class WeightStore:
    """Ordered name -> float32 tensor mapping plus a JSON metadata dict."""

    def __init__(self, metadata: Optional[dict] = None):
        self._tensors: dict[str, np.ndarray] = {}
        self.metadata: dict = dict(metadata or {})

    def __setitem__(self, name: str, value) -> None:
        arr = np.ascontiguousarray(np.asarray(value, dtype=DTYPE))
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ValueError(f"{name}: rank {arr.ndim} outside 1..{MAX_RANK}")
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()


def save_weights(store: WeightStore) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    meta = json.dumps(store.metadata, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(meta))
    out += meta
    out += struct.pack("<I", len(store))
    for name, arr in store.items():
        encoded = name.encode()
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated payload: needed {n} bytes for {what} at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def load_weights(data: bytes) -> WeightStore:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    meta_len = r.u32("metadata length")
    meta_raw = r.take(meta_len, "metadata")
    try:
        metadata = json.loads(meta_raw.decode()) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFormatError(f"unreadable metadata: {e}") from None
    store = WeightStore(metadata)
    count = r.u32("tensor count")
    for i in range(count):
        name_len = r.u16(f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode()
        rank = r.u8(f"rank of {name}")
        if not 1 <= rank <= MAX_RANK:
            raise WeightFormatError(f"{name}: rank {rank} outside 1..{MAX_RANK}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        if any(d < 1 for d in dims):
            raise WeightFormatError(f"{name}: non-positive dimension in {dims}")
        n_elems = int(np.prod(dims))
        raw = r.take(4 * n_elems, f"data of {name}")
        if name in store:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
        store._tensors[name] = np.ascontiguousarray(arr)
    return store


def write_weights_file(store: WeightStore, path) -> bytes:
    data = save_weights(store)
    with open(path, "wb") as f:
        f.write(data)
    return data


def read_weights_file(path) -> tuple[WeightStore, bytes]:
    with open(path, "rb") as f:
        data = f.read()
    return load_weights(data), data


def fingerprint(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def validate_weights(store: WeightStore, spec: BranchNetSpec) -> None:
    """Check that every parameter the spec demands resolves at the right shape."""
    problems = []
    for name, shape in param_entries(spec):
        if name not in store:
            problems.append(f"missing {name} {shape}")
        elif store[name].shape != shape:
            problems.append(f"{name}: shape {store[name].shape}, expected {shape}")
    if problems:
        head = "; ".join(problems[:8])
        more = f" (+{len(problems) - 8} more)" if len(problems) > 8 else ""
        raise WeightValidationError(f"{len(problems)} problems: {head}{more}")


def random_weights(spec: BranchNetSpec, seed: int = 0,
                   metadata: Optional[dict] = None) -> WeightStore:
    """He-initialized weights for a spec; batchnorms start as identity."""
    rng = np.random.default_rng(seed)
    store = WeightStore(metadata if metadata is not None else spec_metadata(spec))
    for name, shape in param_entries(spec):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = int(np.prod(shape[1:]))
            store[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif leaf in ("bias", "beta", "running_mean"):
            store[name] = np.zeros(shape)
        elif leaf in ("gamma", "running_var"):
            store[name] = np.ones(shape)
        else:
            raise ValueError(f"unknown parameter kind {name}")
    return store


# Standard CIFAR-10 channel statistics; recorded in weight-file metadata so
# the trainer and the runtime always agree on preprocessing.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


def spec_metadata(spec: BranchNetSpec, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> dict:
    return {
        "arch": {
            "name": spec.arch,
            "exit_positions": list(spec.exit_positions),
            "class_count": spec.class_count,
            "n_students": spec.n_students,
            "feature_dim": spec.feature_dim,
        },
        "normalization": {"mean": list(mean), "std": list(std)},
        "spec_fingerprint": spec.fingerprint(),
    }
