"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the networks and losses is a Tensor wrapping a
numpy array. Ops build a DAG of closures; Tensor.backward() runs them in
reverse topological order, accumulating (summing) gradients into .grad.
Parameters created with requires_grad=True start with a zero grad buffer, so
an unused parameter reads back an all-zero gradient rather than None.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if (requires_grad and op == "leaf") else None
        self._backward = None
        self._parents = _parents
        self.op = op

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph mechanics ----------------------------------------------------

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Populate .grad of everything this scalar depends on."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    """Create an op output; register the closure only when grads can flow."""
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops (numpy broadcasting allowed) ----------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), "div", backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c

    def backward(g):
        if a.requires_grad:
            a._accum(g * c)

    return _make(data, (a,), "scale", backward)


def texp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * data)

    return _make(data, (a,), "exp", backward)


def tlog(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(data, (a,), "log", backward)


def tsqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * 0.5 / data)

    return _make(data, (a,), "sqrt", backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (data > 0))

    return _make(data, (a,), "relu", backward)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * np.where(mask, 1.0, slope))

    return _make(data, (a,), "leaky_relu", backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(data, (a,), "reshape", backward)


def flatten(a) -> Tensor:
    return reshape(a, (-1,))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return _make(data, (a,), "transpose", backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(p)

    return _make(data, tuple(tensors), "concat", backward)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), "sum", backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.data.shape[i] for i in axes]))
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.data.shape) / n)

    return _make(data, (a,), "mean", backward)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """a @ b. Supports 2-D @ 2-D, N-D @ 2-D (trailing-dim contraction),
    and equal-batch 3-D @ 3-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(
            f"matmul inner dims differ: {ad.shape} @ {bd.shape} (dim {ad.ndim - 1} vs {bd.ndim - 2})"
        )
    if bd.ndim == 2:
        data = ad @ bd

        def backward(g):
            if a.requires_grad:
                a._accum(g @ bd.T)
            if b.requires_grad:
                gb = g.reshape(-1, g.shape[-1])
                b._accum(ad.reshape(-1, ad.shape[-1]).T @ gb)

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape} (dim 0)")
        data = ad @ bd

        def backward(g):
            if a.requires_grad:
                a._accum(g @ bd.transpose(0, 2, 1))
            if b.requires_grad:
                b._accum(ad.transpose(0, 2, 1) @ g)

    else:
        raise ValueError(f"unsupported matmul ranks: {ad.shape} @ {bd.shape}")
    return _make(data, (a, b), "matmul", backward)


# -- neural-net ops -------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    a = _as_tensor(a)
    data = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * data)

    return _make(data, (a,), "softmax", backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along one axis, stabilized by a detached max shift."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.log(s) + m
    soft = e / s

    def backward(g):
        if a.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis)
            a._accum(gk * soft)

    if not keepdims:
        data = np.squeeze(data, axis=axis)
    return _make(data, (a,), "logsumexp", backward)


def layer_norm(a, gamma, beta, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis; gamma/beta must broadcast against the output."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    ax = axis % a.data.ndim
    mu = a.data.mean(axis=ax, keepdims=True)
    xhat = a.data - mu
    var = np.mean(xhat * xhat, axis=ax, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat *= inv_sigma
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.data.shape))
        if a.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=ax, keepdims=True)
            m2 = (gh * xhat).mean(axis=ax, keepdims=True)
            gh -= m1
            gh -= xhat * m2
            gh *= inv_sigma
            a._accum(gh)

    return _make(data, (a, gamma, beta), "layer_norm", backward)


def dropout(a, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout with a stored mask; identity when not training."""
    a = _as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    data = a.data * mask

    def backward(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _make(data, (a,), "dropout", backward)


def global_avg_pool(a) -> Tensor:
    """Mean over all non-channel positions; channels are the leading axis."""
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ValueError(f"global_avg_pool needs rank >= 2, got shape {a.data.shape}")
    axes = tuple(range(1, a.data.ndim))
    return tmean(a, axis=axes)


# slipped inside the norm sqrt so an exactly-zero vector backpropagates a
# finite (zero) gradient instead of 0 * inf; shifts norms by < 1e-12
_NORM_FLOOR = 1e-24


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """cos(a, b) for equal-length vectors, with eps-stabilized norms."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ValueError(f"cosine_similarity wants equal 1-D shapes, got {a.data.shape} and {b.data.shape}")
    dot = tsum(mul(a, b))
    na = add(tsqrt(add(tsum(mul(a, a)), _NORM_FLOOR)), eps)
    nb = add(tsqrt(add(tsum(mul(b, b)), _NORM_FLOOR)), eps)
    return div(dot, mul(na, nb))


def l2_normalize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Rows of unit L2 norm along `axis` (norm + eps in the denominator)."""
    a = _as_tensor(a)
    norm = tsqrt(add(tsum(mul(a, a), axis=axis, keepdims=True), _NORM_FLOOR))
    return div(a, add(norm, eps))


# -- convolutions ----------------------------------------------------------------


def _conv_out_len(n: int, k: int, s: int, p: int, name: str) -> int:
    m = n + 2 * p - k
    if m < 0:
        raise ValueError(f"conv: kernel {k} exceeds padded input {n + 2 * p} along {name}")
    return m // s + 1


def _convnd(a: Tensor, kernels: Tensor, stride, padding, nd: int, op: str) -> Tensor:
    """Shared 2-D/3-D convolution via strided patch extraction + matmul.

    a: (Cin, *spatial) or (B, Cin, *spatial); kernels: (Cout, Cin, *kspatial).
    """
    ad = a.data
    kd = kernels.data
    batched = ad.ndim == nd + 2
    if not batched and ad.ndim != nd + 1:
        raise ValueError(f"{op}: input rank must be {nd + 1} or {nd + 2}, got {ad.ndim}")
    if kd.ndim != nd + 2:
        raise ValueError(f"{op}: kernels rank must be {nd + 2}, got {kd.ndim}")
    x = ad if batched else ad[None]
    B, cin = x.shape[0], x.shape[1]
    if kd.shape[1] != cin:
        raise ValueError(f"{op}: input channels {cin} != kernel channels {kd.shape[1]} (dim 1)")
    spatial = x.shape[2:]
    ksp = kd.shape[2:]
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    names = ("T", "H", "W")[-nd:]
    out_sp = tuple(
        _conv_out_len(spatial[i], ksp[i], stride[i], padding[i], names[i]) for i in range(nd)
    )

    pad_width = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x, pad_width) if any(padding) else x

    # patch layout (cin, *ksp, B, *out_sp) folds the whole batch into the GEMM
    # columns, so forward and both backward products are single dgemm calls
    sx = xp.strides
    view_shape = (B, cin) + ksp + out_sp
    view_strides = (
        sx[:2]
        + tuple(sx[2 + i] for i in range(nd))
        + tuple(sx[2 + i] * stride[i] for i in range(nd))
    )
    cols = np.moveaxis(np.lib.stride_tricks.as_strided(xp, view_shape, view_strides), 0, nd + 1)
    K = cin * int(np.prod(ksp))
    N = int(np.prod(out_sp))
    colmat = cols.reshape(K, B * N)
    cout = kd.shape[0]
    kmat = kd.reshape(cout, K)
    out = (kmat @ colmat).reshape(cout, B, N).transpose(1, 0, 2).reshape((B, cout) + out_sp)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(gb.reshape(B, cout, N).transpose(1, 0, 2)).reshape(cout, B * N)
        if kernels.requires_grad:
            kernels._accum((gmat @ colmat.T).reshape(kd.shape))
        if a.requires_grad:
            dcol = (kmat.T @ gmat).reshape((cin,) + ksp + (B,) + out_sp)
            # accumulate in (cin, B, *spatial) order so every slice add walks
            # contiguous memory; one permuted copy at the end restores layout
            dxp = np.zeros((cin, B) + xp.shape[2:])
            for off in np.ndindex(*ksp):
                sl = tuple(
                    slice(off[i], off[i] + stride[i] * out_sp[i], stride[i]) for i in range(nd)
                )
                dxp[(slice(None), slice(None)) + sl] += dcol[(slice(None),) + off]
            dx = np.moveaxis(dxp, 1, 0)
            if any(padding):
                core = tuple(slice(p, dx.shape[2 + i] - p) for i, p in enumerate(padding))
                dx = dx[(slice(None), slice(None)) + core]
            a._accum(dx if batched else dx[0])

    return _make(out, (a, kernels), op, backward)


def conv3d(a, kernels, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3-D convolution over (Cin, T, H, W) or (B, Cin, T, H, W)."""
    return _convnd(_as_tensor(a), _as_tensor(kernels), stride, padding, 3, "conv3d")


def conv2d(a, kernels, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D convolution over (Cin, H, W) or (B, Cin, H, W)."""
    return _convnd(_as_tensor(a), _as_tensor(kernels), stride, padding, 2, "conv2d")
