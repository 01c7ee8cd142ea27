"""Parameter registry, dense / embedding building blocks and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .tensor import DimensionError, Tape, Tensor, affine, gather_rows

CHECKPOINT_MAGIC = b"TRMPCKPT"
CHECKPOINT_VERSION = 1

INIT_DENSE = "dense"
INIT_BIAS = "bias"
INIT_EMBEDDING = "embedding"
INIT_ZERO = "zero"


class RegistryError(KeyError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    name: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class EmbeddingTable:
    rows: Tensor
    name: str

    @property
    def cardinality(self) -> int:
        return self.rows.shape[0]


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(
            f"dense '{layer.name}': expected trailing axis {layer.in_dim}, got input shape {x.shape}"
        )
    return affine(x, layer.weight, layer.bias)


def embedding_forward(table: EmbeddingTable, idx, column: Optional[str] = None) -> Tensor:
    idx = np.asarray(idx)
    bad = (idx < 0) | (idx >= table.cardinality)
    if bad.any():
        label = column if column is not None else table.name
        raise IndexError(
            f"column '{label}': category index {int(idx[bad].flat[0])} outside [0, {table.cardinality})"
        )
    return gather_rows(table.rows, idx)


@dataclass
class _Slot:
    shape: Tuple[int, ...]
    init: str
    fan: Tuple[int, int]


class ParamRegistry:
    """Ordered name -> array store; insertion order is the update order.

    Shapes are declared first, then :func:`init_params` fills them.  Gradients
    from the most recent backward pass can be parked in :attr:`grads`.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._slots: "OrderedDict[str, _Slot]" = OrderedDict()
        self.values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: Dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def declare(self, name: str, shape, init: str, fan: Optional[Tuple[int, int]] = None) -> None:
        if name in self._slots:
            raise RegistryError(f"duplicate parameter name '{name}'")
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise RegistryError(f"parameter '{name}' has a non-positive axis: {shape}")
        if fan is None:
            fan = (shape[-2], shape[-1]) if len(shape) >= 2 else (1, shape[0])
        self._slots[name] = _Slot(shape, init, fan)
        self.values[name] = np.zeros(shape, dtype=self.dtype)

    def declare_dense(self, name: str, in_dim: int, out_dim: int, copies: Optional[int] = None) -> None:
        """Weight ``[in, out]`` (or ``[copies, in, out]``) plus bias ``[out]`` (or ``[copies, out]``)."""
        lead = () if copies is None else (copies,)
        self.declare(f"{name}.weight", lead + (in_dim, out_dim), INIT_DENSE, (in_dim, out_dim))
        self.declare(f"{name}.bias", lead + (out_dim,), INIT_BIAS)

    def declare_embedding(self, name: str, rows: int, dim: int) -> None:
        self.declare(name, (rows, dim), INIT_EMBEDDING)

    def shape(self, name: str) -> Tuple[int, ...]:
        return self._slots[name].shape

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Wrap every parameter as a Tensor, as tape leaves when ``tape`` is given."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.values.items()}
        return {k: tape.leaf(v) for k, v in self.values.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        missing = set(self._slots) - set(values)
        extra = set(values) - set(self._slots)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, slot in self._slots.items():
            arr = np.asarray(values[k])
            if arr.shape != slot.shape:
                raise CheckpointError(f"parameter '{k}': shape {arr.shape} != declared {slot.shape}")
            self.values[k] = arr.astype(self.dtype, copy=True)

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.values.items())


def init_params(registry: ParamRegistry, seed: int) -> ParamRegistry:
    """Glorot-uniform dense weights, zero biases, N(0, 1/sqrt(d)) embedding rows."""
    rng = np.random.default_rng(seed)
    for name, slot in registry._slots.items():
        if slot.init == INIT_DENSE:
            fan_in, fan_out = slot.fan
            a = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=slot.shape)
        elif slot.init == INIT_EMBEDDING:
            arr = rng.normal(0.0, 1.0 / math.sqrt(slot.shape[-1]), size=slot.shape)
        else:
            arr = np.zeros(slot.shape)
        registry.values[name] = arr.astype(registry.dtype)
    return registry


def bound_dense(params: Mapping[str, Tensor], name: str) -> DenseLayer:
    return DenseLayer(params[f"{name}.weight"], params[f"{name}.bias"], name)


def bound_embedding(params: Mapping[str, Tensor], name: str) -> EmbeddingTable:
    return EmbeddingTable(params[name], name)


# ---------------------------------------------------------------------------
# checkpoint file: magic, u64 header length, JSON header, raw little-endian records
# ---------------------------------------------------------------------------


def save_checkpoint(path, values: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    records = []
    blobs = []
    offset = 0
    for name, arr in values.items():
        arr = np.ascontiguousarray(arr)
        code = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"parameter '{name}': unsupported dtype {arr.dtype}")
        blob = arr.astype(code, copy=False).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": CHECKPOINT_VERSION, "params": records, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = pos + hlen
    values: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for rec in header["params"]:
        start = base + rec["offset"]
        buf = raw[start : start + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated record '{rec['name']}'")
        values[rec["name"]] = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
    return values, header.get("meta", {})
