"""Dense tensors with reverse-mode autodiff on numpy buffers.

Single-threaded and deterministic: the same inputs produce bitwise-identical
outputs. Everything runs in f32 by default; an f64 mode exists for gradient
checking (set the dtype on the leaf tensors).

Attention masks are additive. Masked-out score cells get ``MASK_VALUE``
(a large negative finite float rather than -inf, so the finite-output
contract can be enforced on every op); exp() underflows it to exactly 0.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

MASK_VALUE = -1e30

# When True (default), every op validates that its output is finite and
# raises NumericError otherwise.
_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    return prev


class _NoGrad:
    """Context manager: ops inside do not record the tape."""

    _depth = 0

    def __enter__(self):
        _NoGrad._depth += 1
        return self

    def __exit__(self, *exc):
        _NoGrad._depth -= 1
        return False


def no_grad() -> _NoGrad:
    return _NoGrad()


def _grad_enabled() -> bool:
    return _NoGrad._depth == 0


def _check(arr: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in op output")
    return arr


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A numpy array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # ---- bookkeeping ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # ---- tape ----

    def _make(self, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _check(data)
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self):
        """Populate .grad on every tensor this scalar loss depends on."""
        if self.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- elementwise / arithmetic ----

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accum(_sum_to_shape(g, a.shape).astype(a.dtype))
            if b.requires_grad:
                b._accum(_sum_to_shape(g, b.shape).astype(b.dtype))

        return self._make(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accum(-g)

        return self._make(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accum(_sum_to_shape(g * b.data, a.shape).astype(a.dtype))
            if b.requires_grad:
                b._accum(_sum_to_shape(g * a.data, b.shape).astype(b.dtype))

        return self._make(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        raise ShapeError("tensor/tensor division is not a registered op")

    # ---- shape ops ----

    def reshape(self, *shape):
        a = self
        old = a.shape

        def bwd(g):
            if a.requires_grad:
                a._accum(g.reshape(old))

        return self._make(a.data.reshape(*shape), (a,), bwd)

    def transpose(self, *axes):
        a = self
        inv = np.argsort(axes)

        def bwd(g):
            if a.requires_grad:
                a._accum(g.transpose(inv))

        return self._make(a.data.transpose(axes), (a,), bwd)

    def __getitem__(self, idx):
        a = self

        def bwd(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, idx, g)
                a._accum(full)

        return self._make(a.data[idx], (a,), bwd)

    def sum(self, axis=None):
        a = self

        def bwd(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy())
            else:
                a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

        return self._make(a.data.sum(axis=axis), (a,), bwd)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Registered forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b; 2-D or batched with identical leading dims."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return a._make(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis; x may have any leading dims."""
    din, dout = w.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: x {x.shape} vs w {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def bwd(g):
        g2 = g.reshape(-1, dout)
        if x.requires_grad:
            x._accum((g @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x.data.reshape(-1, din).T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return x._make(y, parents, bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup: id out of range")

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accum(full)

    return table._make(table.data[ids], (table,), bwd)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale each last-dim row to RMS 1, then multiply by gain."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: gain {gain.shape} vs x {x.shape}")
    n = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    s = ms**-0.5
    xn = x.data * s

    def bwd(g):
        gg = g * gain.data
        if x.requires_grad:
            dot = (gg * x.data).sum(axis=-1, keepdims=True)
            x._accum(s * gg - (s**3 / n) * x.data * dot)
        if gain.requires_grad:
            gain._accum((g * xn).reshape(-1, n).sum(axis=0))

    return x._make(xn * gain.data, (x, gain), bwd)


def _rope_tables(positions: np.ndarray, dh: int, dtype, theta: float = 10000.0):
    half = dh // 2
    freqs = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions: np.ndarray, theta: float = 10000.0) -> Tensor:
    """Rotary encoding over the last dim; positions index axis -2.

    x: (..., T, dh) with dh even; positions: (T,) absolute indices, or any
    shape broadcastable to x.shape[:-1] for per-row position tables.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ShapeError("rope_apply: head dim must be even")
    positions = np.asarray(positions)
    if positions.shape[-1] != x.shape[-2]:
        raise ShapeError("rope_apply: positions length mismatch")
    half = dh // 2
    cos, sin = _rope_tables(positions, dh, x.dtype, theta)
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        if x.requires_grad:
            g1, g2 = g[..., :half], g[..., half:]
            x._accum(
                np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)
            )

    return x._make(out, (x,), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accum(y * (g - dot))

    return x._make(y, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def bwd(g):
        if x.requires_grad:
            x._accum(g * sig * (1.0 + x.data * (1.0 - sig)))

    return x._make(y, (x,), bwd)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, scores_mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention with an additive score mask.

    q: (..., Q, dh), k: (..., K, dh), v: (..., K, dh).
    scores_mask: additive array broadcastable to (..., Q, K); allowed cells 0,
    disallowed cells MASK_VALUE.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"masked_attention: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    kt = k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
    scores = matmul(q, kt) * scale
    if scores_mask is not None:
        scores = scores + Tensor(np.asarray(scores_mask, dtype=q.dtype))
    return matmul(softmax_lastdim(scores), v)


def nll_lastdim(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row -log softmax(logits)[label]; logits (N, V), labels (N,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"nll_lastdim: logits {logits.shape}, labels {labels.shape}")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(logits.shape[0])
    nll = lse - z[rows, labels]

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[rows, labels] -= 1.0
            logits._accum(p * g[:, None])

    return logits._make(nll, (logits,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return tensors[0]._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd
    )
