"""Dense float64 tensors with reverse-mode gradients.

Every operation builds its output from numpy and attaches a backward
closure, so the fixed set of ops needed by the network is differentiable
end to end.  Feature maps follow the [batch, channel, time, vertex]
axis convention throughout.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class AxisError(ValueError):
    """An axis argument is out of range for the operand's rank."""


class EmptyBatchError(ValueError):
    """An operation that needs batch statistics received an empty batch."""


class SequenceTooShortError(ValueError):
    """The time axis is too short for the kernel/stride/padding combination."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A contiguous float64 array plus an optional gradient buffer.

    Instances are treated as immutable once an op has returned them;
    only optimizers write into ``data`` (between steps) and ``backward``
    writes into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, _prev=()):
        # note: asarray keeps 0-d scalars 0-d where ascontiguousarray would not
        self.data = np.asarray(data, dtype=np.float64, order="C")
        if self.data.ndim > 4:
            raise ShapeError(f"rank {self.data.ndim} > 4 not supported")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = _prev

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from this (scalar) tensor."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar (thin wrappers over module-level ops) --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A named, trainable tensor (``requires_grad=False`` marks frozen
    state such as batch-norm running statistics)."""

    __slots__ = ("name",)

    def __init__(self, data, name="", requires_grad=True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward):
    """Build an output tensor, attaching the graph only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _prev=tuple(parents))
        out._backward = backward
        return out
    return Tensor(data)


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0.0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make(x.data * mask, (x,), backward)


def sigmoid(x):
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return _make(y, (x,), backward)


def log(x, floor=0.0):
    """Natural log; values are clamped at ``floor`` first when floor > 0."""
    x = _as_tensor(x)
    clamped = np.maximum(x.data, floor) if floor > 0.0 else x.data
    y = np.log(clamped)

    def backward(g):
        if x.requires_grad:
            dx = g / clamped
            if floor > 0.0:
                dx = dx * (x.data >= floor)
            x.accumulate_grad(dx)

    return _make(y, (x,), backward)


def softmax(x, axis):
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (g - inner))

    return _make(y, (x,), backward)


def logsumexp(x, axis, keepdims=False):
    """log(sum(exp(x))) along ``axis``, used as a smooth channel max."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = m + np.log(s)
    soft = e / s

    def backward(g):
        if x.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis)
            x.accumulate_grad(gk * soft)

    return _make(y if keepdims else np.squeeze(y, axis), (x,), backward)


def mean(x, axes, keepdims=False):
    """Arithmetic mean over ``axes`` (global average pooling for feature
    maps when axes=(2, 3))."""
    x = _as_tensor(x)
    axes = tuple(sorted(_check_axis(a, x.ndim) for a in axes))
    count = 1
    for a in axes:
        count *= x.shape[a]
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gk = g
            if not keepdims:
                for a in axes:
                    gk = np.expand_dims(gk, a)
            x.accumulate_grad(np.broadcast_to(gk, x.shape) / count)

    return _make(y, (x,), backward)


def global_avg_pool(x, axes=(2, 3), keepdims=False):
    """Mean over the pooled axes of a [B, C, T, V] feature map."""
    return mean(x, axes, keepdims=keepdims)


def reshape(x, shape):
    x = _as_tensor(x)
    y = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _make(y, (x,), backward)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError(f"stack: shapes {base} and {t.shape} differ")
    axis = _check_axis(axis, len(base) + 1)
    y = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.split(g, len(tensors), axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(np.squeeze(p, axis=axis))

    return _make(y, tuple(tensors), backward)


def index_axis(x, axis, i):
    """Select index ``i`` along ``axis`` (the axis is dropped)."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    idx = tuple(i if a == axis else slice(None) for a in range(x.ndim))
    y = x.data[idx]

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.accumulate_grad(full)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# linear-algebra ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    y = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(y, (a, b), backward)


def linear(x, w, b=None):
    """x[..., Cin] @ w[Cin, Cout] (+ b[Cout])."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(np.tensordot(x.data, g, axes=(range(x.ndim - 1),) * 2))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(y, parents, backward)


def channel_linear(x, w, b=None):
    """1x1 'convolution': map the channel axis of x[B, Cin, T, V] by
    w[Cin, Cout], giving [B, Cout, T, V]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel_linear: input {x.shape} vs weight {w.shape}")
    y = np.einsum("bctv,co->botv", x.data, w.data, optimize=True)
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.einsum("botv,co->bctv", g, w.data, optimize=True))
        if w.requires_grad:
            w.accumulate_grad(np.einsum("bctv,botv->co", x.data, g, optimize=True))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _make(y, parents, backward)


def graph_aggregate(x, adjacency):
    """Aggregate vertex neighbourhoods: y[..., v] = sum_u A[v, u] x[..., u].

    ``adjacency`` is a fixed (non-trainable) V x V numpy array.
    """
    x = _as_tensor(x)
    a = np.asarray(adjacency, dtype=np.float64)
    if x.shape[-1] != a.shape[1]:
        raise ShapeError(f"graph_aggregate: {x.shape} vs adjacency {a.shape}")
    y = x.data @ a.T

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ a)

    return _make(y, (x,), backward)


def cross_scale_aggregate(x, attn):
    """Message passing across scales.

    y[b, c, t, p] = sum_q attn[b, p, q] * x[b, c, t, q], with gradients
    flowing into both the source features and the attention matrix.
    """
    x, attn = _as_tensor(x), _as_tensor(attn)
    if x.ndim != 4 or attn.ndim != 3 or x.shape[-1] != attn.shape[2] or x.shape[0] != attn.shape[0]:
        raise ShapeError(f"cross_scale_aggregate: {x.shape} vs attention {attn.shape}")
    y = np.einsum("bpq,bctq->bctp", attn.data, x.data, optimize=True)

    def backward(g):
        if attn.requires_grad:
            attn.accumulate_grad(np.einsum("bctp,bctq->bpq", g, x.data, optimize=True))
        if x.requires_grad:
            x.accumulate_grad(np.einsum("bpq,bctp->bctq", attn.data, g, optimize=True))

    return _make(y, (x, attn), backward)


def vertex_similarity(za, zb):
    """Inner products between per-vertex embeddings.

    za: [B, d, Va], zb: [B, d, Vb] -> scores [B, Va, Vb] with
    y[b, p, q] = sum_d za[b, d, p] * zb[b, d, q].
    """
    za, zb = _as_tensor(za), _as_tensor(zb)
    if za.ndim != 3 or zb.ndim != 3 or za.shape[:2] != zb.shape[:2]:
        raise ShapeError(f"vertex_similarity: shapes {za.shape} and {zb.shape}")
    y = np.einsum("bdp,bdq->bpq", za.data, zb.data, optimize=True)

    def backward(g):
        if za.requires_grad:
            za.accumulate_grad(np.einsum("bpq,bdq->bdp", g, zb.data, optimize=True))
        if zb.requires_grad:
            zb.accumulate_grad(np.einsum("bpq,bdp->bdq", g, za.data, optimize=True))

    return _make(y, (za, zb), backward)


# ---------------------------------------------------------------------------
# temporal convolution


def temporal_conv(x, w, b=None, stride=1, pad=None):
    """1-D convolution along the time axis, independently per vertex.

    x: [B, Cin, T, V], w: [Cout, Cin, k].  ``pad`` defaults to (k-1)/2,
    which preserves T at stride 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"temporal_conv: input {x.shape}, weight {w.shape}")
    B, C, T, V = x.shape
    c_out, c_in, k = w.shape
    if c_in != C:
        raise ShapeError(f"temporal_conv: {C} input channels vs weight {w.shape}")
    if k % 2 != 1:
        raise ShapeError(f"temporal_conv: kernel size {k} must be odd")
    if stride not in (1, 2):
        raise ValueError(f"temporal_conv: stride {stride} not in (1, 2)")
    if pad is None:
        pad = (k - 1) // 2
    t_out = (T + 2 * pad - k) // stride + 1
    if t_out < 1:
        raise SequenceTooShortError(
            f"temporal_conv: T={T} with kernel {k}, pad {pad}, stride {stride}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else x.data
    sb, sc, st, sv = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, t_out, k, V),
        strides=(sb, sc, st * stride, st, sv),
        writeable=False,
    )
    # im2col: one big GEMM instead of k small ones
    cols = np.ascontiguousarray(windows.transpose(0, 2, 4, 1, 3)).reshape(
        B * t_out * V, C * k
    )
    w_mat = w.data.reshape(c_out, C * k)
    y = (cols @ w_mat.T).reshape(B, t_out, V, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(B * t_out * V, c_out)
        if w.requires_grad:
            w.accumulate_grad((g_mat.T @ cols).reshape(c_out, C, k))
        if x.requires_grad:
            dcols = (g_mat @ w_mat).reshape(B, t_out, V, C, k)
            dxp = np.zeros((B, C, T + 2 * pad, V))
            for j in range(k):
                dxp[:, :, j : j + stride * t_out : stride, :] += dcols[
                    :, :, :, :, j
                ].transpose(0, 3, 1, 2)
            x.accumulate_grad(dxp[:, :, pad : pad + T, :] if pad else dxp)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _make(np.ascontiguousarray(y), parents, backward)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over the (batch, time, vertex) axes.

    ``running_mean``/``running_var`` are the float64 buffers of
    ``Parameter`` objects (requires_grad=False); training mode updates
    them in place with population statistics.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected [B,C,T,V], got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyBatchError("batch_norm: empty batch")
    axes = (0, 2, 3)
    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * m
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * v
    else:
        m = running_mean.data
        v = running_var.data
    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                g_mean = g.mean(axis=axes)[None, :, None, None]
                gx_mean = (g * xhat).mean(axis=axes)[None, :, None, None]
                x.accumulate_grad(scale * (g - g_mean - xhat * gx_mean))
            else:
                x.accumulate_grad(scale * g)

    return _make(y, (x, gamma, beta), backward)
