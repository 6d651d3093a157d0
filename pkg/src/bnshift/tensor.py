"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new Tensor that records its parent tensors and a closure
mapping the output gradient to parent gradients. ``backward()`` on a scalar
walks the recorded subgraph in reverse creation order, which is a valid
topological order because operands always exist before their result, and
accumulates gradients into ``requires_grad`` leaves.

The op set is deliberately small: elementwise arithmetic between equal
shapes or with a Python scalar, matmul, full reductions, reshape/concat/row
slicing. Layer-shaped ops (conv, batch norm, pooling) are built on top via
``Tensor.from_op`` in their own modules. Broadcasting beyond scalars is out
of scope by design.
"""

from __future__ import annotations

import itertools
import struct

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "narrow",
    "backward",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]

_BNST_MAGIC = b"BNST"

_node_ids = itertools.count(1)
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff graph."""


class no_grad:
    """Context manager that disables graph recording (evaluation fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    """N-d float64 array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_nid")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bw = None
        self._nid = next(_node_ids)

    @staticmethod
    def from_op(data, parents, backward_fn):
        """Create an op output.

        ``backward_fn(grad_out)`` must return one gradient array (or None)
        per parent, aligned with ``parents``. Recording is skipped inside
        ``no_grad`` or when no parent participates in autodiff.
        """
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
            out._parents = tuple(parents)
            out._bw = backward_fn
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise(
            ShapeError(f"item() needs a scalar, got shape {self.shape}")
        )

    __float__ = item

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward pass -------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into all requires_grad leaves.

        Repeated calls accumulate; callers zero grads between optimizer steps.
        """
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self._parents:
            if self.requires_grad:
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                self.grad += np.ones_like(self.data)
            return
        # Collect the reachable subgraph, then replay it in reverse creation
        # order (valid topological order by construction).
        seen = {id(self): self}
        stack = [self]
        while stack:
            for p in stack.pop()._parents:
                if id(p) not in seen:
                    seen[id(p)] = p
                    if p._parents:
                        stack.append(p)
        interior = sorted(
            (t for t in seen.values() if t._parents), key=lambda t: t._nid, reverse=True
        )
        flows = {id(self): np.ones_like(self.data)}
        for t in interior:
            g = flows.pop(id(t), None)
            if g is None:
                continue
            for p, pg in zip(t._parents, t._bw(g)):
                if pg is None:
                    continue
                if p._parents:
                    acc = flows.get(id(p))
                    flows[id(p)] = pg if acc is None else acc + pg
                elif p.requires_grad:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division only supported by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _raise(err):
    raise err


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return Tensor.from_op(a.data + float(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.size == 1 and a.ndim == 0:
        a, b = b, a
    if b.size == 1 and b.ndim == 0:
        return Tensor.from_op(
            a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum()))
        )
    _check_same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return Tensor.from_op(a.data - float(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return scale(a, b)
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s):
    """Multiply by a Python scalar."""
    a = _as_tensor(a)
    s = float(s)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,))


def neg(a):
    a = _as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def pow_const(a, p):
    a = _as_tensor(a)
    p = float(p)
    return Tensor.from_op(
        a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),)
    )


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions / reshaping ------------------------------------------------------


def tsum(a):
    a = _as_tensor(a)
    return Tensor.from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def tmean(a):
    a = _as_tensor(a)
    n = a.size
    return Tensor.from_op(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return Tensor.from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(old),)
    )


def concat(tensors, axis=1):
    """Concatenate along ``axis``; the inverse split drives the backward."""
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def narrow(a, start, stop):
    """Slice rows [start, stop) along axis 0."""
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Tensor.from_op(a.data[start:stop].copy(), (a,), bw)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return (g @ b.data.T, a.data.T @ g)

    return Tensor.from_op(a.data @ b.data, (a, b), bw)


def backward(loss):
    """Module-level alias for ``loss.backward()``."""
    _as_tensor(loss).backward()


# -- binary tensor format ----------------------------------------------------------
#
# magic "BNST", u32 rank, u32 extents (little-endian), float64 payload
# little-endian, row-major. Shared by dataset, checkpoint, and trace files.


def write_tensor(f, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(_BNST_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f):
    magic = f.read(4)
    if magic != _BNST_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, arr):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)
