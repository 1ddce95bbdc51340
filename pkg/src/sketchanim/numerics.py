"""Dense float32 tensors with recorded-tape reverse-mode differentiation.

Tensors are plain C-contiguous float32 numpy arrays.  Every op in this
module accepts either raw arrays or ``Node`` handles living on a ``Tape``;
with raw arrays it just computes, with nodes it also appends the operation
to the tape so ``Recording.vjp`` can replay it backwards.  Ops never mutate
their inputs.

Reductions run in a fixed order (ascending index on the numba backend, a
fixed BLAS order otherwise), so identical inputs give identical bits on one
platform.  The backward sweep walks the recorded operation list in reverse,
which fixes the gradient accumulation order as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .errors import DimensionError, UnknownGraphError

Array = np.ndarray


def as_f32(x) -> Array:
    """Coerce to a C-contiguous float32 array.

    Scalars come back with shape (1,): the package convention is that
    scalar-valued tensors are rank 1, never 0-d.
    """
    return np.ascontiguousarray(x, dtype=np.float32)


def tensor(data, shape: tuple[int, ...] | None = None) -> Array:
    """Build a float32 tensor, optionally reshaped."""
    a = as_f32(data)
    if shape is not None:
        a = a.reshape(shape)
    return np.ascontiguousarray(a)


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------


@dataclass
class _Entry:
    op: str
    parents: tuple[int, ...]
    aux: dict
    out: int
    needs: bool


class Node:
    """Handle to one value on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.tape._values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    """Ordered operation record for one computation."""

    def __init__(self):
        self._values: list[Array] = []
        self._entries: list[_Entry] = []
        self._inputs: dict[str, int] = {}
        self._needs: list[bool] = []

    def input(self, slot: str, value) -> Node:
        """Register a differentiable input under a slot name."""
        if slot in self._inputs:
            raise ValueError(f"duplicate input slot {slot!r}")
        idx = self._push(as_f32(value), needs=True)
        self._inputs[slot] = idx
        return Node(self, idx)

    def constant(self, value) -> Node:
        return Node(self, self._push(as_f32(value), needs=False))

    def _push(self, value: Array, needs: bool) -> int:
        self._values.append(value)
        self._needs.append(needs)
        return len(self._values) - 1

    def _record(self, op: str, parents: tuple[int, ...], aux: dict, value: Array) -> Node:
        needs = any(self._needs[p] for p in parents)
        out = self._push(value, needs)
        self._entries.append(_Entry(op, parents, aux, out, needs))
        return Node(self, out)

    def finalize(self, output: Node, register: bool = False) -> "Recording":
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        rec = Recording(self, output.idx)
        if register:
            register_recording(rec)
        return rec


class Recording:
    """A finished tape plus its output, ready for VJPs."""

    _counter = 0

    def __init__(self, tape: Tape, out_idx: int):
        Recording._counter += 1
        self.id = f"rec-{Recording._counter:06d}"
        self._tape = tape
        self._out = out_idx

    @property
    def output(self) -> Array:
        return self._tape._values[self._out]

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(self._tape._inputs)

    def vjp(self, cotangent, wrt: Iterable[str] | None = None) -> dict[str, Array]:
        """Pull the cotangent back to the requested input slots."""
        tape = self._tape
        ct = as_f32(cotangent)
        out_val = tape._values[self._out]
        if ct.shape != out_val.shape:
            raise DimensionError(
                f"cotangent shape {ct.shape} does not match output shape {out_val.shape}"
            )
        slots = tuple(wrt) if wrt is not None else self.slots
        for s in slots:
            if s not in tape._inputs:
                raise UnknownGraphError(f"slot {s!r} was never recorded as an input")

        grads: dict[int, Array] = {self._out: ct}
        for entry in reversed(tape._entries):
            g = grads.pop(entry.out, None)
            if g is None or not entry.needs:
                continue
            for pidx, pg in _VJPS[entry.op](entry, tape._values, g):
                if not tape._needs[pidx]:
                    continue
                if pidx in grads:
                    grads[pidx] = grads[pidx] + pg
                else:
                    grads[pidx] = pg
        out: dict[str, Array] = {}
        for s in slots:
            idx = tape._inputs[s]
            g = grads.get(idx)
            out[s] = as_f32(g) if g is not None else np.zeros_like(tape._values[idx])
        return out


_RECORDINGS: dict[str, Recording] = {}


def register_recording(rec: Recording) -> str:
    _RECORDINGS[rec.id] = rec
    return rec.id


def release_recording(rec_id: str) -> None:
    _RECORDINGS.pop(rec_id, None)


@dataclass(frozen=True)
class GradientRequest:
    """Lookup-by-id gradient query against a registered recording."""

    function: str
    wrt: frozenset[str]
    cotangent: Array

    def __init__(self, function: str, wrt, cotangent):
        object.__setattr__(self, "function", function)
        object.__setattr__(self, "wrt", frozenset(wrt))
        object.__setattr__(self, "cotangent", as_f32(cotangent))


def gradient(req: GradientRequest) -> dict[str, Array]:
    """Gradients of a registered recording w.r.t. the requested slots."""
    rec = _RECORDINGS.get(req.function)
    if rec is None:
        raise UnknownGraphError(f"no recorded computation with id {req.function!r}")
    return rec.vjp(req.cotangent, wrt=req.wrt)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _tape_of(*xs) -> Tape | None:
    t = None
    for x in xs:
        if isinstance(x, Node):
            if t is None:
                t = x.tape
            elif x.tape is not t:
                raise ValueError("operands live on different tapes")
    return t


def _val(x) -> Array:
    return x.value if isinstance(x, Node) else as_f32(x)


def _idx(tape: Tape, x) -> int:
    if isinstance(x, Node):
        return x.idx
    return tape._push(as_f32(x), needs=False)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return as_f32(g.reshape(shape))


_VJPS: dict[str, Callable] = {}


def _op(name: str):
    def deco(fn):
        _VJPS[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    t = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = as_f32(va + vb)
    if t is None:
        return out
    return t._record("add", (_idx(t, a), _idx(t, b)), {}, out)


@_op("add")
def _vjp_add(entry, values, g):
    pa, pb = entry.parents
    return [(pa, _unbroadcast(g, values[pa].shape)), (pb, _unbroadcast(g, values[pb].shape))]


def sub(a, b):
    t = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = as_f32(va - vb)
    if t is None:
        return out
    return t._record("sub", (_idx(t, a), _idx(t, b)), {}, out)


@_op("sub")
def _vjp_sub(entry, values, g):
    pa, pb = entry.parents
    return [(pa, _unbroadcast(g, values[pa].shape)), (pb, _unbroadcast(-g, values[pb].shape))]


def mul(a, b):
    t = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = as_f32(va * vb)
    if t is None:
        return out
    return t._record("mul", (_idx(t, a), _idx(t, b)), {}, out)


@_op("mul")
def _vjp_mul(entry, values, g):
    pa, pb = entry.parents
    return [
        (pa, _unbroadcast(g * values[pb], values[pa].shape)),
        (pb, _unbroadcast(g * values[pa], values[pb].shape)),
    ]


def scale(a, c: float):
    """Multiply by a python scalar (kept out of the graph)."""
    t = _tape_of(a)
    out = as_f32(_val(a) * c)
    if t is None:
        return out
    return t._record("scale", (_idx(t, a),), {"c": float(c)}, out)


@_op("scale")
def _vjp_scale(entry, values, g):
    return [(entry.parents[0], as_f32(g * entry.aux["c"]))]


def _matmul_fwd(va: Array, vb: Array) -> Array:
    if va.ndim == 2 and vb.ndim == 2:
        if va.shape[1] != vb.shape[0]:
            raise DimensionError(f"matmul {va.shape} @ {vb.shape}")
        return kernels.mm(va, vb)
    if va.ndim == 3 and vb.ndim == 2:
        if va.shape[2] != vb.shape[0]:
            raise DimensionError(f"matmul {va.shape} @ {vb.shape}")
        flat = kernels.mm(va.reshape(-1, va.shape[2]), vb)
        return flat.reshape(va.shape[0], va.shape[1], vb.shape[1])
    if va.ndim == 3 and vb.ndim == 3:
        if va.shape[0] != vb.shape[0] or va.shape[2] != vb.shape[1]:
            raise DimensionError(f"matmul {va.shape} @ {vb.shape}")
        return kernels.bmm(va, vb)
    raise DimensionError(f"matmul {va.shape} @ {vb.shape}")


def matmul(a, b):
    """Matrix product: 2d @ 2d, batched 3d @ 2d, or 3d @ 3d."""
    t = _tape_of(a, b)
    out = _matmul_fwd(_val(a), _val(b))
    if t is None:
        return out
    return t._record("matmul", (_idx(t, a), _idx(t, b)), {}, out)


def _swap_last(x: Array) -> Array:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


@_op("matmul")
def _vjp_matmul(entry, values, g):
    pa, pb = entry.parents
    va, vb = values[pa], values[pb]
    if va.ndim == 2 and vb.ndim == 2:
        return [(pa, kernels.mm(g, _swap_last(vb))), (pb, kernels.mm(_swap_last(va), g))]
    if va.ndim == 3 and vb.ndim == 2:
        gf = g.reshape(-1, g.shape[2])
        da = kernels.mm(gf, _swap_last(vb)).reshape(va.shape)
        db = kernels.mm(_swap_last(va.reshape(-1, va.shape[2])), gf)
        return [(pa, da), (pb, db)]
    return [
        (pa, kernels.bmm(g, _swap_last(vb))),
        (pb, kernels.bmm(_swap_last(va), g)),
    ]


def transpose(a, axes: tuple[int, ...]):
    t = _tape_of(a)
    out = np.ascontiguousarray(np.transpose(_val(a), axes))
    if t is None:
        return out
    return t._record("transpose", (_idx(t, a),), {"axes": tuple(axes)}, out)


@_op("transpose")
def _vjp_transpose(entry, values, g):
    inv = np.argsort(entry.aux["axes"])
    return [(entry.parents[0], np.ascontiguousarray(np.transpose(g, inv)))]


def reshape(a, shape: tuple[int, ...]):
    t = _tape_of(a)
    v = _val(a)
    out = np.ascontiguousarray(v.reshape(shape))
    if t is None:
        return out
    return t._record("reshape", (_idx(t, a),), {"old": v.shape}, out)


@_op("reshape")
def _vjp_reshape(entry, values, g):
    return [(entry.parents[0], np.ascontiguousarray(g.reshape(entry.aux["old"])))]


def reduce_sum(a, axis=None, keepdims: bool = False):
    t = _tape_of(a)
    v = _val(a)
    out = as_f32(v.sum(axis=axis, keepdims=keepdims))
    if t is None:
        return out
    return t._record(
        "reduce_sum", (_idx(t, a),), {"axis": axis, "keepdims": keepdims, "old": v.shape}, out
    )


@_op("reduce_sum")
def _vjp_reduce_sum(entry, values, g):
    old = entry.aux["old"]
    axis = entry.aux["axis"]
    if axis is not None and not entry.aux["keepdims"]:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(old) for ax in axes)
        shape = tuple(1 if i in axes else n for i, n in enumerate(old))
        g = g.reshape(shape)
    elif axis is None:
        g = g.reshape((1,) * len(old))
    return [(entry.parents[0], as_f32(np.broadcast_to(g, old).copy()))]


def softmax_rows(x):
    """Softmax over the last axis, shifted by the row max for stability."""
    t = _tape_of(x)
    v = _val(x)
    if v.ndim < 1 or v.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {v.shape}")
    flat = kernels.softmax2(v.reshape(-1, v.shape[-1]))
    out = np.ascontiguousarray(flat.reshape(v.shape))
    if t is None:
        return out
    return t._record("softmax_rows", (_idx(t, x),), {}, out)


@_op("softmax_rows")
def _vjp_softmax(entry, values, g):
    y = values[entry.out]
    dot = (g * y).sum(axis=-1, keepdims=True)
    return [(entry.parents[0], as_f32(y * (g - dot)))]


def tanh(x):
    t = _tape_of(x)
    out = as_f32(np.tanh(_val(x)))
    if t is None:
        return out
    return t._record("tanh", (_idx(t, x),), {}, out)


@_op("tanh")
def _vjp_tanh(entry, values, g):
    y = values[entry.out]
    return [(entry.parents[0], as_f32(g * (1.0 - y * y)))]


def rsqrt(x):
    t = _tape_of(x)
    out = as_f32(1.0 / np.sqrt(_val(x)))
    if t is None:
        return out
    return t._record("rsqrt", (_idx(t, x),), {}, out)


@_op("rsqrt")
def _vjp_rsqrt(entry, values, g):
    y = values[entry.out]
    return [(entry.parents[0], as_f32(g * (-0.5) * y * y * y))]


def concat(parts, axis: int = 0):
    t = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    out = np.ascontiguousarray(np.concatenate(vals, axis=axis))
    if t is None:
        return out
    extents = tuple(v.shape[axis] for v in vals)
    return t._record(
        "concat", tuple(_idx(t, p) for p in parts), {"axis": axis, "extents": extents}, out
    )


@_op("concat")
def _vjp_concat(entry, values, g):
    axis = entry.aux["axis"]
    out = []
    start = 0
    for pidx, n in zip(entry.parents, entry.aux["extents"]):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(start, start + n)
        out.append((pidx, np.ascontiguousarray(g[tuple(sl)])))
        start += n
    return out


def narrow(x, axis: int, start: int, length: int):
    """Contiguous slice of one axis."""
    t = _tape_of(x)
    v = _val(x)
    sl = [slice(None)] * v.ndim
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(v[tuple(sl)])
    if t is None:
        return out
    return t._record(
        "narrow", (_idx(t, x),), {"axis": axis, "start": start, "length": length, "old": v.shape}, out
    )


@_op("narrow")
def _vjp_narrow(entry, values, g):
    full = np.zeros(entry.aux["old"], dtype=np.float32)
    sl = [slice(None)] * full.ndim
    sl[entry.aux["axis"]] = slice(entry.aux["start"], entry.aux["start"] + entry.aux["length"])
    full[tuple(sl)] = g
    return [(entry.parents[0], full)]


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def scaled_attention_scores(q, k):
    """q [b,m,d], k [b,n,d] -> q @ k^T / sqrt(d), shape [b,m,n]."""
    vq, vk = _val(q), _val(k)
    if vq.ndim != 3 or vk.ndim != 3:
        raise DimensionError(f"attention scores need 3-d operands, got {vq.shape} and {vk.shape}")
    if vq.shape[0] != vk.shape[0] or vq.shape[2] != vk.shape[2]:
        raise DimensionError(f"attention scores mismatch: {vq.shape} vs {vk.shape}")
    kt = transpose(k, (0, 2, 1))
    return scale(matmul(q, kt), 1.0 / math.sqrt(vq.shape[2]))


def layer_norm(x, eps: float = 1e-5):
    """Parameter-free layer norm over the last axis."""
    d = _val(x).shape[-1]
    mu = scale(reduce_sum(x, axis=-1, keepdims=True), 1.0 / d)
    c = sub(x, mu)
    var = scale(reduce_sum(mul(c, c), axis=-1, keepdims=True), 1.0 / d)
    return mul(c, rsqrt(add(var, np.float32(eps))))
