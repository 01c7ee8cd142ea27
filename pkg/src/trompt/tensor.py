"""Dense tensors with a tape-based reverse-mode autodiff.

Every primitive takes :class:`Tensor` operands, computes its result with numpy
and, when at least one operand lives on a :class:`Tape`, appends a node holding
a vector-Jacobian closure.  Nodes are appended in evaluation order, so the
append order is already a topological order and :func:`backward` is a single
reverse sweep.

Only the handful of primitives the Trompt equations need are provided, and
broadcasting is limited to two patterns: a trailing singleton axis in
:func:`mul_broadcast` and explicit replication via :func:`stack_batch` /
:func:`expand_axis`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "DimensionError",
    "NonFiniteError",
    "GraphError",
    "ProbeError",
    "batched_matmul",
    "batched_transpose",
    "permute",
    "softmax_last_axis",
    "add",
    "mul_broadcast",
    "scale",
    "relu",
    "stack_batch",
    "expand_axis",
    "stack",
    "concat_last_axis",
    "reduce_sum_axis",
    "sum_all",
    "reshape",
    "affine",
    "gather_rows",
    "softmax_cross_entropy",
    "mean_squared_error",
    "backward",
    "gradient_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (foreign tape, non-scalar loss, ...)."""


class ProbeError(RuntimeError):
    """Finite-difference probing hit a non-finite function value."""


VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class Node:
    kind: str
    inputs: Tuple[Optional[int], ...]
    vjp: Optional[VJP]
    shape: Tuple[int, ...]
    dtype: np.dtype = np.dtype(np.float64)


class Tape:
    """Append-only record of primitive applications for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, dtype=None) -> "Tensor":
        """Register ``data`` as a differentiable input and return its tensor."""
        arr = _as_float_array(data, dtype)
        _check_finite("leaf", arr)
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, arr.shape, arr.dtype))
        return Tensor(arr, tape=self, node_id=node_id)

    def _record(self, kind: str, inputs: Sequence["Tensor"], data: np.ndarray, vjp: VJP) -> "Tensor":
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(Node(kind, ids, vjp, data.shape, data.dtype))
        return Tensor(data, tape=self, node_id=node_id)


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


class Tensor:
    """A float array, optionally attached to a tape as node ``node_id``.

    Tensors without a tape are plain immutable values; nothing downstream of
    them is recorded unless another operand is on a tape.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional[Tape] = None, node_id: Optional[int] = None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul_broadcast(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


TensorLike = Union[Tensor, np.ndarray, float]


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], data: np.ndarray, make_vjp: Callable[[Tuple[bool, ...]], VJP]) -> Tensor:
    _check_finite(kind, data)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise GraphError(f"{kind}: operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(data)
    needs = tuple(t.tape is tape for t in inputs)
    return tape._record(kind, inputs, data, make_vjp(needs))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def batched_matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """``out[..., i, j] = sum_t a[..., i, t] * b[..., t, j]`` over equal batch axes."""
    a, b = _t(a), _t(b)
    if a.ndim < 3 or b.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"batched_matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def make(needs):
        A, B = a.data, b.data

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(B, -1, -2)) if needs[0] else None
            gb = np.matmul(np.swapaxes(A, -1, -2), g) if needs[1] else None
            return ga, gb

        return vjp

    return _emit("batched_matmul", (a, b), out, make)


def batched_transpose(a: TensorLike) -> Tensor:
    """Swap the last two axes of a rank >= 3 tensor."""
    a = _t(a)
    if a.ndim < 3:
        raise DimensionError(f"batched_transpose: need rank >= 3, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return _emit("batched_transpose", (a,), out, lambda needs: lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = _t(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _emit("permute", (a,), out, lambda needs: lambda g: (np.transpose(g, inverse),))


def affine(x: TensorLike, weight: TensorLike, bias: TensorLike) -> Tensor:
    """``x @ weight + bias`` applied over the trailing axis of ``x``."""
    x, weight, bias = _t(x), _t(weight), _t(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],) or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"affine: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}"
        )
    out = np.matmul(x.data, weight.data) + bias.data

    def make(needs):
        X, W = x.data, weight.data

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = np.matmul(g, W.T) if needs[0] else None
            gw = np.matmul(X.reshape(-1, X.shape[-1]).T, g2) if needs[1] else None
            gb = g2.sum(axis=0) if needs[2] else None
            return gx, gw, gb

        return vjp

    return _emit("affine", (x, weight, bias), out, make)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def softmax_last_axis(x: TensorLike) -> Tensor:
    x = _t(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_last_axis: empty last axis in shape {x.shape}")
    _check_finite("softmax_last_axis input", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def make(needs):
        def vjp(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return vjp

    return _emit("softmax_last_axis", (x,), y, make)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data
    return _emit("add", (a, b), out, lambda needs: lambda g: (g, g))


def _trailing_singleton_of(small: Tuple[int, ...], big: Tuple[int, ...]) -> bool:
    return len(small) == len(big) and len(big) >= 1 and small[-1] == 1 and small[:-1] == big[:-1]


def mul_broadcast(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise product; one operand may carry a trailing singleton axis."""
    a, b = _t(a), _t(b)
    if a.shape == b.shape:
        reduce_a = reduce_b = False
    elif _trailing_singleton_of(b.shape, a.shape):
        reduce_a, reduce_b = False, True
    elif _trailing_singleton_of(a.shape, b.shape):
        reduce_a, reduce_b = True, False
    else:
        raise DimensionError(f"mul_broadcast: shapes {a.shape} and {b.shape} are not broadcastable")
    out = a.data * b.data

    def make(needs):
        A, B = a.data, b.data

        def vjp(g):
            ga = gb = None
            if needs[0]:
                ga = g * B
                if reduce_a:
                    ga = ga.sum(axis=-1, keepdims=True)
            if needs[1]:
                gb = g * A
                if reduce_b:
                    gb = gb.sum(axis=-1, keepdims=True)
            return ga, gb

        return vjp

    return _emit("mul_broadcast", (a, b), out, make)


def scale(a: TensorLike, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    out = a.data * a.data.dtype.type(c)
    return _emit("scale", (a,), out, lambda needs: lambda g: (g * g.dtype.type(c),))


def relu(a: TensorLike) -> Tensor:
    # subgradient at exactly 0 is 0
    a = _t(a)
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))
    return _emit("relu", (a,), out, lambda needs: lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def _axis(axis: int, ndim: int, kind: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{kind}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def expand_axis(a: TensorLike, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and replicate ``a`` ``n`` times along it."""
    a = _t(a)
    axis = _axis(axis, a.ndim + 1, "expand_axis")
    if n < 1:
        raise DimensionError(f"expand_axis: replication count must be >= 1, got {n}")
    target = a.shape[:axis] + (n,) + a.shape[axis:]
    out = np.broadcast_to(np.expand_dims(a.data, axis), target)
    return _emit("expand_axis", (a,), out, lambda needs: lambda g: (g.sum(axis=axis),))


def stack_batch(a: TensorLike, batch: int) -> Tensor:
    """Replicate an input-independent tensor along a new leading batch axis."""
    return expand_axis(a, 0, batch)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    if not ts:
        raise DimensionError("stack: no operands")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {t.shape} differ")
    axis = _axis(axis, len(shape) + 1, "stack")
    out = np.stack([t.data for t in ts], axis=axis)

    def make(needs):
        def vjp(g):
            return tuple(np.take(g, i, axis=axis) if needs[i] else None for i in range(len(ts)))

        return vjp

    return _emit("stack", ts, out, make)


def concat_last_axis(*tensors: TensorLike) -> Tensor:
    ts = [_t(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_last_axis: no operands")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.ndim == 0 or t.shape[:-1] != lead:
            raise DimensionError(
                "concat_last_axis: leading shapes differ: " + ", ".join(str(x.shape) for x in ts)
            )
    out = np.concatenate([t.data for t in ts], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def make(needs):
        def vjp(g):
            return tuple(
                g[..., bounds[i] : bounds[i + 1]] if needs[i] else None for i in range(len(ts))
            )

        return vjp

    return _emit("concat_last_axis", ts, out, make)


def reduce_sum_axis(a: TensorLike, axis: int) -> Tensor:
    a = _t(a)
    axis = _axis(axis, a.ndim, "reduce_sum_axis")
    shape = a.shape
    out = a.data.sum(axis=axis)
    return _emit(
        "reduce_sum_axis",
        (a,),
        out,
        lambda needs: lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),),
    )


def sum_all(a: TensorLike) -> Tensor:
    a = _t(a)
    shape = a.shape
    out = np.asarray(a.data.sum())
    return _emit("sum_all", (a,), out, lambda needs: lambda g: (np.broadcast_to(g, shape),))


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _t(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.data.size or any(s < 0 for s in shape):
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {shape}")
    old = a.shape
    out = a.data.reshape(shape)
    return _emit("reshape", (a,), out, lambda needs: lambda g: (g.reshape(old),))


def gather_rows(table: TensorLike, idx) -> Tensor:
    """``table[idx]`` for an integer index array of any shape."""
    table = _t(table)
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be rank 2, got {table.shape}")
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"gather_rows: index dtype must be integer, got {idx.dtype}")
    idx = idx.astype(np.int64, copy=False)
    n = table.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise IndexError(f"gather_rows: index {int(idx[bad].flat[0])} out of range [0, {n})")
    out = table.data[idx]
    shape = table.shape

    def make(needs):
        def vjp(g):
            gt = np.zeros(shape, dtype=g.dtype)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
            return (gt,)

        return vjp

    return _emit("gather_rows", (table,), out, make)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: TensorLike, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits [B, T]`` against class ids ``[B]``."""
    logits = _t(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, t = logits.shape
    if n == 0:
        raise DimensionError("softmax_cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= t:
        raise ValueError(f"softmax_cross_entropy: class index outside [0, {t})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def make(needs):
        def vjp(g):
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1
            return (p * (g / n),)

        return vjp

    return _emit("softmax_cross_entropy", (logits,), out, make)


def mean_squared_error(pred: TensorLike, target) -> Tensor:
    pred = _t(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mean_squared_error: prediction {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        raise DimensionError("mean_squared_error: empty batch")
    diff = pred.data - target
    out = np.asarray((diff * diff).mean())
    n = diff.size
    return _emit("mean_squared_error", (pred,), out, lambda needs: lambda g: (diff * (2.0 * g / n),))


# ---------------------------------------------------------------------------
# reverse sweep and verification
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Return ``d loss / d node`` for every reached node and every leaf.

    Leaves the loss does not depend on get exact zero gradients.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise GraphError("backward: loss is not recorded on this tape")
    if loss.shape != ():
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=loss.dtype)}
    for i in range(loss.node_id, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp is None or gi is None:
                continue
            prev = grads.get(inp)
            grads[inp] = gi if prev is None else prev + gi
    for i, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            grads[i] = np.array(grads[i], dtype=node.dtype) if i in grads else np.zeros(node.shape, node.dtype)
    return grads


def gradient_check(
    f: Callable,
    x: Union[np.ndarray, Mapping[str, np.ndarray]],
    eps: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``x`` is one array or a mapping of named arrays; ``f`` receives the
    matching Tensor (or dict of Tensors) and must return a scalar Tensor.
    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ValueError("gradient_check: eps must be positive")
    single = not isinstance(x, Mapping)
    arrays = {"x": np.array(x, dtype=np.float64)} if single else {k: np.array(v, dtype=np.float64) for k, v in x.items()}

    def call(tensors):
        return f(tensors["x"]) if single else f(tensors)

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in arrays.items()}
    out = call(leaves)
    grads = backward(tape, out)

    def probe(name, flat_index, delta):
        consts = {k: Tensor(v) for k, v in arrays.items()}
        shifted = arrays[name].copy()
        shifted.reshape(-1)[flat_index] += delta
        consts[name] = Tensor(shifted)
        try:
            val = float(call(consts).data)
        except NonFiniteError as exc:
            raise ProbeError(f"non-finite value probing {name}[{flat_index}]") from exc
        if not math.isfinite(val):
            raise ProbeError(f"non-finite value probing {name}[{flat_index}]")
        return val

    worst = 0.0
    for name, arr in arrays.items():
        analytic = grads[leaves[name].node_id].reshape(-1)
        for i in range(arr.size):
            numeric = (probe(name, i, eps) - probe(name, i, -eps)) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
