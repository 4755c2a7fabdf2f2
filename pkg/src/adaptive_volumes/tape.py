"""Minimal reverse-mode differentiation over the network's fixed op set.

Ops executed inside ``with Tape() as tape:`` are recorded when any input
requires a gradient; ``tape.backward(loss)`` replays them in reverse.
Shapes are explicit: only scalars broadcast, plus the dedicated
``add_bias`` row broadcast.
"""

from __future__ import annotations

import struct
import json

import numpy as np
import scipy.sparse as sp

DEBUG = False
_ACTIVE: list = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


class Tape:
    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor, seed=None):
        """Accumulate d(loss)/d(input) into ``.grad`` of every recorded tensor."""
        if seed is None:
            if loss.value.size != 1:
                raise ShapeError("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.value)
        _accum(loss, seed)
        for out, inputs, backward in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for t, gt in zip(inputs, grads):
                if gt is not None and t.requires_grad:
                    _accum(t, gt)

    def relu_signature(self) -> int:
        """Hash of all ReLU activation patterns, used to detect kinks in FD probes."""
        h = 0
        for out, _, bw in self.records:
            mask = getattr(bw, "mask", None)
            if mask is not None:
                h = hash((h, mask.tobytes()))
        return h


def _accum(t: Tensor, g):
    # never in place: backward closures may hand the same array to several inputs
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _record(value, inputs, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced by op")
    if needs and _ACTIVE:
        _ACTIVE[-1].records.append((out, inputs, backward))
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"add_const: shape mismatch {a.shape} vs {c.shape}")
    return _record(a.value + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable scalar or same-shape array."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return _record(a.value * c, (a,), lambda g: (g * c,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return mul_const(a, float(s))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-C bias to every row of an (N, C) tensor."""
    if a.value.ndim != 2 or b.value.reshape(-1).shape[0] != a.shape[1]:
        raise ShapeError(f"add_bias: shape mismatch {a.shape} + {b.shape}")
    bshape = b.shape
    return _record(a.value + b.value.reshape(1, -1), (a, b),
                   lambda g: (g, g.sum(axis=0).reshape(bshape)))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def backward(g):
        return (g * mask,)

    backward.mask = mask
    return _record(a.value * mask, (a,), backward)


def square(a: Tensor) -> Tensor:
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _record(np.asarray(a.value.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape),))


def row_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(a.value.sum(axis=1, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g, shape),))


def logsumexp_rows(a: Tensor) -> Tensor:
    m = a.value.max(axis=1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s
    return _record(m + np.log(s), (a,), lambda g: (g * soft,))


# ---------------------------------------------------------------- structure

def concat(tensors, axis=1) -> Tensor:
    values = [t.value for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _record(out, tuple(tensors), backward)


def take(a: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
    """Contiguous sub-block ``a[rows, cols]`` with slice objects."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _record(a.value[rows, cols].copy(), (a,), backward)


class Index:
    """Row index array with a cached sparse selection matrix.

    Entry ``-1`` selects nothing (a zero row on gather, dropped on scatter).
    """

    def __init__(self, idx, size: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.size = int(size)
        if self.idx.size and (self.idx.max() >= self.size or self.idx.min() < -1):
            raise IndexError("index out of range")
        self._mat = None

    @property
    def matrix(self):
        # (len(idx), size) with a single 1 per valid row
        if self._mat is None:
            valid = self.idx >= 0
            rows = np.flatnonzero(valid)
            self._mat = sp.csr_matrix(
                (np.ones(len(rows)), (rows, self.idx[valid])),
                shape=(len(self.idx), self.size))
            self._mat_t = self._mat.T.tocsr()
        return self._mat

    @property
    def matrix_t(self):
        self.matrix
        return self._mat_t


def _as_index(idx, size):
    return idx if isinstance(idx, Index) else Index(idx, size)


def gather_rows(a: Tensor, idx) -> Tensor:
    """``out[e] = a[idx[e]]`` (zero where ``idx[e] == -1``)."""
    ix = _as_index(idx, a.shape[0])
    if ix.size != a.shape[0]:
        raise ShapeError("gather_rows: index built for a different row count")
    if np.all(ix.idx >= 0):
        out = a.value[ix.idx]
    else:
        out = np.asarray(ix.matrix @ a.value)
    return _record(out, (a,), lambda g: (np.asarray(ix.matrix_t @ g),))


def scatter_sum(rows: Tensor, dst, n: int | None = None) -> Tensor:
    """``out[i] = sum of rows[e] with dst[e] == i``; backward gathers by ``dst``."""
    if isinstance(dst, Index):
        ix = dst
    else:
        if n is None:
            raise ShapeError("scatter_sum needs the output row count")
        ix = Index(dst, n)
    if len(ix.idx) != rows.shape[0]:
        raise ShapeError("scatter_sum: index length differs from row count")
    out = np.asarray(ix.matrix_t @ rows.value)
    return _record(out, (rows,), lambda g: (np.asarray(ix.matrix @ g),))


# ---------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place on ``params`` values."""
    state.t += 1
    b1c = 1.0 - beta1 ** state.t
    b2c = 1.0 - beta2 ** state.t
    for name, p in params.items():
        value = p.value if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
    return params, state


# ---------------------------------------------------------------- checkpoints

MAGIC = b"AVCKPT\x00"
VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Named float64 tensors, little-endian, after a magic header and version byte."""
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size,
                                      offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return tensors, meta
