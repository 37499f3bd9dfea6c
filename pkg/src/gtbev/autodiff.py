"""Reverse-mode automatic differentiation on a flat tape.

A ``Graph`` records every primitive application in creation order while it is
the active graph (``with Graph() as g:``).  ``g.backward(loss)`` replays the
tape once, in reverse, and returns a dict mapping each leaf tensor that
requires gradients to its accumulated gradient array.  Outside any active
graph nothing is recorded and evaluation is plain numpy, which is what the
inference paths use.

Design rules kept deliberately strict:

* tensors wrap a contiguous row-major numpy array; the shape never changes
  after construction (ops return new tensors),
* no implicit broadcasting: elementwise primitives demand identical shapes,
  the only sanctioned mixed form is scalar-with-tensor (``scale`` for python
  floats, ``scale_by`` for a one-element tensor),
* every structural mismatch raises :class:`ShapeError` naming the primitive
  and the offending shapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "as_tensor",
    "add", "sub", "mul", "scale", "scale_by", "matmul", "linear",
    "transpose", "reshape", "concat", "slice_rows", "slice_cols",
    "index_batch", "take_rows", "gather_rows", "scatter_rows", "tile_batch",
    "mean_pool", "sum_all", "mean_all", "absolute", "exp", "clamp_max",
    "sigmoid", "relu", "softmax", "log_softmax", "cross_entropy",
    "layer_norm", "l2_normalize", "attend",
]


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not line up for a primitive."""


class Tensor:
    """A value node: numpy array plus a requires-grad flag.

    Tensors are hashable by identity, which is what lets gradient dicts key
    on the parameter objects themselves.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the underlying array."""
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Thin operator sugar; all routes go through the strict primitives.
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __neg__(self): return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other): return matmul(self, other)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    return t


def as_tensor(x, dtype=None) -> Tensor:
    """Coerce arrays / lists / scalars to a non-differentiable Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


_STATE = threading.local()


def _active_graph():
    stack = getattr(_STATE, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Append-only tape of primitive applications.

    Entering the context makes this graph the active recorder for the current
    thread; graphs nest (inner-most wins).  ``backward`` walks the tape in
    reverse creation order exactly once.
    """

    __slots__ = ("_nodes", "_produced")

    def __init__(self):
        # node = (out_tensor, input_tensors, backward_fn)
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of the scalar ``loss`` w.r.t. every requires-grad leaf.

        Pure: calling twice on the same graph returns identical values.
        """
        if not isinstance(loss, Tensor):
            raise TypeError(f"backward: expected a Tensor loss, got {type(loss).__name__}")
        if loss.data.size != 1:
            raise ShapeError(
                f"backward: loss must be a scalar, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        owned: set[int] = set()
        for out, inputs, bwd in reversed(self._nodes):
            gout = grads.get(out)
            if gout is None:
                continue
            for t, gin in zip(inputs, bwd(gout)):
                if gin is None or not t.requires_grad:
                    continue
                cur = grads.get(t)
                if cur is None:
                    grads[t] = gin
                elif id(t) in owned:
                    cur += gin
                else:
                    # first stored array may alias a bwd output; never mutate it
                    grads[t] = cur + gin
                    owned.add(id(t))
        return {
            t: g for t, g in grads.items()
            if t.requires_grad and id(t) not in self._produced
        }


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    out = _wrap(out_data)
    g = _active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._nodes.append((out, inputs, bwd))
        g._produced.add(id(out))
    return out


def _check_tensor(op: str, *ts):
    for t in ts:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: expected Tensor operands, got {type(t).__name__}")
    if len(ts) > 1:
        d0 = ts[0].data.dtype
        for t in ts[1:]:
            if t.data.dtype != d0:
                raise ShapeError(
                    f"{op}: mixed dtypes {d0} and {t.data.dtype}")


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("add", a, b)
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("sub", a, b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("mul", a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not a tensor)."""
    _check_tensor("scale", a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a one-element tensor (the scalar-tensor case)."""
    _check_tensor("scale_by", a, s)
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scale must have one element, got shape {s.shape}")
    sval = s.data.reshape(())
    ad = a.data

    def bwd(g):
        return g * sval, np.asarray(np.sum(g * ad)).reshape(s.shape).astype(s.data.dtype)

    return _emit(ad * sval, (a, s), bwd)


def absolute(a: Tensor) -> Tensor:
    _check_tensor("absolute", a)
    sgn = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a: Tensor) -> Tensor:
    _check_tensor("exp", a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(a, cap); gradient is zero where the cap is active."""
    _check_tensor("clamp_max", a)
    cap = float(cap)
    open_mask = a.data < cap
    return _emit(np.minimum(a.data, cap), (a,),
                 lambda g: (g * open_mask,))


def sigmoid(a: Tensor) -> Tensor:
    _check_tensor("sigmoid", a)
    # clip keeps exp in range; the tails are saturated anyway
    x = np.clip(a.data, -60.0, 60.0)
    out = 1.0 / (1.0 + np.exp(-x))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    _check_tensor("relu", a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (n,k)@(k,m), (B,n,k)@(B,k,m) or (B,n,k)@(k,m)."""
    _check_tensor("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
        return _emit(ad @ bd, (a, b),
                     lambda g: (g @ bd.T, ad.T @ g))
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
        return _emit(ad @ bd, (a, b),
                     lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g))
    if ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")

        def bwd(g):
            B, n, k = ad.shape
            m = bd.shape[1]
            return g @ bd.T, ad.reshape(B * n, k).T @ g.reshape(B * n, m)

        return _emit(ad @ bd, (a, b), bwd)
    raise ShapeError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x @ w + b for 2-D or batched 3-D ``x``."""
    _check_tensor("linear", x, w, b)
    xd, wd, bdat = x.data, w.data, b.data
    if wd.ndim != 2 or bdat.ndim != 1 or wd.shape[1] != bdat.shape[0]:
        raise ShapeError(f"linear: weight {w.shape} and bias {b.shape} incompatible")
    if xd.ndim not in (2, 3) or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {x.shape} and weight {w.shape} not aligned")
    out = xd @ wd + bdat

    def bwd(g):
        if xd.ndim == 2:
            return g @ wd.T, xd.T @ g, g.sum(axis=0)
        B, n, k = xd.shape
        m = wd.shape[1]
        g2 = g.reshape(B * n, m)
        return g @ wd.T, xd.reshape(B * n, k).T @ g2, g2.sum(axis=0)

    return _emit(out, (x, w, b), bwd)


def transpose(a: Tensor) -> Tensor:
    _check_tensor("transpose", a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,),
                 lambda g: (g.T,))


# ---------------------------------------------------------------------------
# structure


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _check_tensor("reshape", a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no tensors given")
    _check_tensor("concat", *parts)
    nd = parts[0].ndim
    axis = axis % nd if nd else 0
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != nd or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(
                f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * nd
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _emit(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous range along axis 0."""
    _check_tensor("slice_rows", a)
    n = a.shape[0] if a.ndim else 0
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: range [{start}:{stop}] out of bounds for shape {a.shape}")

    def bwd(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        return (z,)

    return _emit(a.data[start:stop].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous range along the last axis."""
    _check_tensor("slice_cols", a)
    n = a.shape[-1] if a.ndim else 0
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_cols: range [{start}:{stop}] out of bounds for shape {a.shape}")

    def bwd(g):
        z = np.zeros_like(a.data)
        z[..., start:stop] = g
        return (z,)

    return _emit(np.ascontiguousarray(a.data[..., start:stop]), (a,), bwd)


def index_batch(a: Tensor, i: int) -> Tensor:
    """Drop axis 0 at index i: (B, ...) -> (...)."""
    _check_tensor("index_batch", a)
    if a.ndim < 1 or not (0 <= i < a.shape[0]):
        raise ShapeError(f"index_batch: index {i} out of bounds for shape {a.shape}")

    def bwd(g):
        z = np.zeros_like(a.data)
        z[i] = g
        return (z,)

    return _emit(a.data[i].copy(), (a,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices sum in the backward."""
    _check_tensor("take_rows", a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows: expected 2-D tensor and 1-D indices, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of bounds for shape {a.shape}")

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(a.data[idx], (a,), bwd)


def gather_rows(a: Tensor, batch_idx, row_idx) -> Tensor:
    """Pick rows (b_i, r_i) from a (B, N, C) tensor into an (L, C) tensor."""
    _check_tensor("gather_rows", a)
    bi = np.asarray(batch_idx, dtype=np.int64)
    ri = np.asarray(row_idx, dtype=np.int64)
    if a.ndim != 3 or bi.shape != ri.shape or bi.ndim != 1:
        raise ShapeError(f"gather_rows: bad index shapes for tensor {a.shape}")
    if bi.size and (bi.min() < 0 or bi.max() >= a.shape[0]
                    or ri.min() < 0 or ri.max() >= a.shape[1]):
        raise ShapeError(f"gather_rows: index out of bounds for shape {a.shape}")

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (bi, ri), g)
        return (z,)

    return _emit(a.data[bi, ri], (a,), bwd)


def scatter_rows(src: Tensor, batch_idx, row_idx, batch: int, rows: int) -> Tensor:
    """Place (L, C) rows into a zero-padded (batch, rows, C) tensor.

    Index pairs must be unique; later duplicates would silently overwrite.
    """
    _check_tensor("scatter_rows", src)
    bi = np.asarray(batch_idx, dtype=np.int64)
    ri = np.asarray(row_idx, dtype=np.int64)
    if src.ndim != 2 or bi.shape != ri.shape or bi.ndim != 1 or bi.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_rows: bad index shapes for tensor {src.shape}")
    if bi.size and (bi.min() < 0 or bi.max() >= batch or ri.min() < 0 or ri.max() >= rows):
        raise ShapeError(f"scatter_rows: index out of bounds for ({batch}, {rows})")
    out = np.zeros((batch, rows, src.shape[1]), dtype=src.data.dtype)
    out[bi, ri] = src.data
    return _emit(out, (src,), lambda g: (g[bi, ri],))


def tile_batch(a: Tensor, batch: int) -> Tensor:
    """Repeat a (N, C) tensor into (batch, N, C); backward sums over copies."""
    _check_tensor("tile_batch", a)
    if a.ndim != 2:
        raise ShapeError(f"tile_batch: expected a 2-D tensor, got shape {a.shape}")
    batch = int(batch)
    out = np.broadcast_to(a.data, (batch,) + a.shape).copy()
    return _emit(out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions


def mean_pool(a: Tensor, indices) -> Tensor:
    """Mean of the axis-0 slices named by ``indices``."""
    _check_tensor("mean_pool", a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("mean_pool: indices must be a non-empty 1-D list")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError(f"mean_pool: index out of bounds for shape {a.shape}")
    inv = 1.0 / idx.size

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g * inv)
        return (z,)

    return _emit(a.data[idx].mean(axis=0), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    _check_tensor("sum_all", a)
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    _check_tensor("mean_all", a)
    shape = a.shape
    inv = 1.0 / a.size

    def bwd(g):
        return (np.broadcast_to(g * inv, shape),)

    return _emit(np.asarray(a.data.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# normalizations and losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_tensor("softmax", a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_tensor("log_softmax", a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (a,), bwd)


def cross_entropy(logits: Tensor, targets, weights=None,
                  reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class targets.

    ``logits`` is (N, K) or a single (K,) row; ``targets`` holds ints in
    [0, K).  ``weights`` optionally scales each row's loss (a constant, not a
    tensor).  Reduction is "mean" or "sum" over rows.
    """
    _check_tensor("cross_entropy", logits)
    x = logits.data
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, K) logits, got shape {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = x.shape
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError(f"cross_entropy: target out of range for {k} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    w = None if weights is None else np.asarray(weights, dtype=x.dtype).reshape(-1)
    if w is not None and w.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {w.shape[0]} weights")

    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = (lse[:, 0] - z[np.arange(n), t])
    if w is not None:
        ce = ce * w
    total = ce.sum()
    if reduction == "mean":
        total = total / n

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(n), t] -= 1.0
        if w is not None:
            p *= w[:, None]
        if reduction == "mean":
            p *= 1.0 / n
        dx = p * g
        return (dx[0] if squeeze else dx,)

    return _emit(np.asarray(total), (logits,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    _check_tensor("layer_norm", x, gain, bias)
    c = x.shape[-1] if x.ndim else 0
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature width {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gg = g * gd
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _emit(xhat * gd + bias.data, (x, gain, bias), bwd)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis row to unit L2 norm, guarding max(norm, eps)."""
    _check_tensor("l2_normalize", x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    d = np.maximum(n, eps)
    out = xd / d
    live = n > eps

    def bwd(g):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        return (g / d - live * xd * (dot / (d * d * d)),)

    return _emit(out, (x,), bwd)


# ---------------------------------------------------------------------------
# attention


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
           key_mask: np.ndarray | None = None,
           bias: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention as one fused node.

    Shapes: q (B, Nq, C), k and v (B, Nk, C) with C divisible by num_heads.
    ``key_mask`` is an optional (B, Nk) boolean array; masked keys get zero
    probability and the remaining weights renormalize, which matches dropping
    those keys from the input.  A row with no usable keys attends to nothing
    and outputs zeros.  ``bias`` is an optional constant (Nq, Nk) array added
    to the scaled logits of every batch item and head; it carries no gradient,
    which is what a fixed attention prior wants.

    The backward pass is closed-form: with A = softmax(S), O = A V,
      dV = A^T dO,  dA = dO V^T,  dS = A * (dA - rowsum(dA * A)),
      dQ = dS K / sqrt(dh),  dK = dS^T Q / sqrt(dh).
    """
    _check_tensor("attend", q, k, v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(
            f"attend: expected 3-D tensors, got {q.shape}, {k.shape}, {v.shape}")
    B, nq, c = q.shape
    if k.shape != (B, k.shape[1], c) or v.shape != k.shape:
        raise ShapeError(f"attend: key {k.shape} / value {v.shape} mismatch query {q.shape}")
    if c % num_heads != 0:
        raise ShapeError(f"attend: width {c} not divisible by {num_heads} heads")
    nk = k.shape[1]
    dh = c // num_heads
    inv_sqrt = float(1.0 / np.sqrt(dh))   # python float keeps float32 inputs float32

    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (nq, nk):
            raise ShapeError(f"attend: bias {bias.shape} does not match ({nq}, {nk})")
        if not np.isfinite(bias).all():
            raise ShapeError("attend: bias must be finite; masking is key_mask's job")

    km = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (B, nk):
            raise ShapeError(f"attend: key mask {km.shape} does not match keys ({B}, {nk})")
        if km.all():
            km = None   # identical arithmetic to the unmasked path

    def split(x, n):
        # (B, n, C) -> contiguous (B*H, n, dh) so the gemms see flat batches
        return np.ascontiguousarray(
            x.reshape(B, n, num_heads, dh).transpose(0, 2, 1, 3)
        ).reshape(B * num_heads, n, dh)

    def join(x, n):
        return np.ascontiguousarray(
            x.reshape(B, num_heads, n, dh).transpose(0, 2, 1, 3)
        ).reshape(B, n, c)

    qh, kh, vh = split(q.data, nq), split(k.data, nk), split(v.data, nk)
    scores = qh @ kh.transpose(0, 2, 1)
    scores *= inv_sqrt                                     # (B*H, Nq, Nk)
    if bias is not None:
        scores += bias[None, :, :]

    if km is None:
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        probs = scores
    else:
        allow = np.repeat(km, num_heads, axis=0)[:, None, :]   # (B*H, 1, Nk)
        m = np.where(allow, scores, -np.inf).max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)                   # all-masked rows
        scores -= m
        np.exp(scores, out=scores)
        scores *= allow
        denom = scores.sum(axis=-1, keepdims=True)
        # rows with no usable key keep their zeros (denom stays 0 there)
        probs = np.divide(scores, denom, out=scores, where=denom > 0)

    out = join(probs @ vh, nq)

    def bwd(g):
        gh = split(g, nq)
        dv = probs.transpose(0, 2, 1) @ gh
        da = gh @ vh.transpose(0, 2, 1)
        rowdot = (da * probs).sum(axis=-1, keepdims=True)
        da -= rowdot
        da *= probs                                        # da now holds dS
        dq = da @ kh
        dq *= inv_sqrt
        dk = da.transpose(0, 2, 1) @ qh
        dk *= inv_sqrt
        return join(dq, nq), join(dk, nk), join(dv, nk)

    return _emit(out, (q, k, v), bwd)
