"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Tensors record their parents and a backward closure; ``backward()`` walks
the tape in reverse topological order.  Ops preserve the input dtype, so
the same graph runs in float32 for training and float64 for gradient
checking.
"""

from __future__ import annotations

import numpy as np


class GradMismatch(AssertionError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.requires_grad and node._parents:
                node.grad = None  # free intermediates

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return _make(data, (a,), backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    # stable sigmoid: never exponentiate a positive argument; the
    # magnitude clamp keeps exp() away from subnormal outputs, which
    # would otherwise slow every downstream elementwise op by ~20x
    x = np.minimum(np.abs(a.data), 30.0)
    e = np.exp(-x)
    sig = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    data = a.data * sig

    def backward(g):
        _accum(a, g * (sig * (1 + a.data * (1 - sig))))

    return _make(data, (a,), backward)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(old))

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def gather_rows(a, idx) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        _accum(a, out)

    return _make(data, (a,), backward)


def set_rows(a, idx, rows) -> Tensor:
    """Copy of ``a`` with rows at ``idx`` replaced by ``rows`` (bit-exact elsewhere)."""
    a, rows = as_tensor(a), as_tensor(rows)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data.copy()
    data[idx] = rows.data

    def backward(g):
        ga = g.copy()
        ga[idx] = 0
        _accum(a, ga)
        _accum(rows, g[idx])

    return _make(data, (a, rows), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-D and batched (stacked leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    # the clamp keeps exp() away from subnormal outputs (major slowdown)
    shifted = np.maximum(a.data - a.data.max(axis=axis, keepdims=True), -30.0)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backward)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = a.data.shape[-1]

    def backward(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accum(beta, _unbroadcast(g, beta.data.shape))
        gx = g * gamma.data
        gxhat_sum = gx.sum(axis=-1, keepdims=True)
        gxhat_dot = (gx * xhat).sum(axis=-1, keepdims=True)
        _accum(a, inv / n * (n * gx - gxhat_sum - xhat * gxhat_dot))

    return _make(data, (a, gamma, beta), backward)


def channel_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (C, H, W) with per-channel scale/shift.

    a: (N, C, H, W); gamma, beta: broadcastable (1, C, 1, 1).  Group
    normalization with a single group, so it is batch-size independent.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    axes = (1, 2, 3)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    m = a.data.shape[1] * a.data.shape[2] * a.data.shape[3]

    def backward(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accum(beta, _unbroadcast(g, beta.data.shape))
        gx = g * gamma.data
        gx_sum = gx.sum(axis=axes, keepdims=True)
        gx_dot = (gx * xhat).sum(axis=axes, keepdims=True)
        _accum(a, inv / m * (m * gx - gx_sum - xhat * gx_dot))

    return _make(data, (a, gamma, beta), backward)


# -- conv / resampling -----------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    """NCHW convolution with an O x C x k x k kernel (cross-correlation).

    Internally works in an (H, N, W, C) layout so every kernel-offset row
    slice is a contiguous GEMM operand.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.data.shape
    o, c2, k, _ = w.data.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input {c}, kernel {c2}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xt = np.zeros((hp, n, wp, c), dtype=x.data.dtype)
    xt[pad : pad + h, :, pad : pad + wd, :] = x.data.transpose(2, 0, 3, 1)
    # contiguous (k, k, c, o) so each wk[i, j] slice stays on the BLAS fast path
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
    acc = np.zeros((ho, n, wo, o), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            rows = xt[i : i + stride * (ho - 1) + 1 : stride]
            if stride == 1:
                t = rows.reshape(ho * n * wp, c) @ wk[i, j]
                acc += t.reshape(ho, n, wp, o)[:, :, j : j + wo]
            else:
                src = rows[:, :, j : j + stride * (wo - 1) + 1 : stride, :]
                t = np.ascontiguousarray(src).reshape(ho * n * wo, c) @ wk[i, j]
                acc += t.reshape(ho, n, wo, o)
    out = np.ascontiguousarray(acc.transpose(1, 3, 0, 2))  # (n, o, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, o, 1, 1)
        parents.append(b)
    data = out

    def backward(g):
        g_hnwo = np.ascontiguousarray(g.transpose(2, 0, 3, 1))  # (ho, n, wo, o)
        gw = np.zeros_like(wk)
        gxt = np.zeros_like(xt)
        gflat = g_hnwo.reshape(ho * n * wo, o)
        for i in range(k):
            for j in range(k):
                rows = xt[i : i + stride * (ho - 1) + 1 : stride]
                if stride == 1:
                    src = rows[:, :, j : j + wo, :]
                    src2 = np.ascontiguousarray(src).reshape(ho * n * wo, c)
                    gw[i, j] = src2.T @ gflat
                    gsrc = (gflat @ wk[i, j].T).reshape(ho, n, wo, c)
                    gxt[i : i + ho, :, j : j + wo, :] += gsrc
                else:
                    src = rows[:, :, j : j + stride * (wo - 1) + 1 : stride, :]
                    src2 = np.ascontiguousarray(src).reshape(ho * n * wo, c)
                    gw[i, j] = src2.T @ gflat
                    gsrc = (gflat @ wk[i, j].T).reshape(ho, n, wo, c)
                    gxt[i : i + stride * (ho - 1) + 1 : stride, :, j : j + stride * (wo - 1) + 1 : stride, :] += gsrc
        _accum(w, gw.transpose(3, 2, 0, 1))
        gx = gxt[pad : pad + h, :, pad : pad + wd, :].transpose(1, 3, 0, 2)
        _accum(x, np.ascontiguousarray(gx))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(data, tuple(parents), backward)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling, stride 2."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        _accum(x, gx)

    return _make(data, (x,), backward)


def upsample_nearest2(x) -> Tensor:
    x = as_tensor(x)
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        n, c, h, w = x.data.shape
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, (x,), backward)


# -- gradient checking -----------------------------------------------------


def grad_check(
    loss_fn,
    params: list[Tensor],
    tolerance: float = 1e-4,
    n_samples: int = 200,
    h: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    The check runs entirely in float64 copies of the parameters.  Raises
    ``GradMismatch`` naming the worst coordinate if any sampled relative
    error exceeds the tolerance.
    """
    p64 = [Tensor(p.data.astype(np.float64), requires_grad=True, name=p.name) for p in params]
    loss = loss_fn(p64)
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in p64]

    rng = np.random.default_rng(seed)
    worst = {"rel_err": 0.0, "param": None, "coord": None, "analytic": 0.0, "numeric": 0.0}
    per_param = []
    for pi, p in enumerate(p64):
        size = p.data.size
        coords = (
            np.arange(size)
            if size <= n_samples
            else rng.choice(size, size=n_samples, replace=False)
        )
        flat = p.data.ravel()
        max_err = 0.0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            lp = float(loss_fn(p64).data)
            flat[ci] = orig - h
            lm = float(loss_fn(p64).data)
            flat[ci] = orig
            numeric = (lp - lm) / (2 * h)
            a = analytic[pi].ravel()[ci]
            scale = max(abs(a), abs(numeric), 1e-8)
            rel = abs(a - numeric) / scale
            if rel > max_err:
                max_err = rel
            if rel > worst["rel_err"]:
                worst = {
                    "rel_err": rel,
                    "param": p.name or f"param{pi}",
                    "coord": int(ci),
                    "analytic": float(a),
                    "numeric": float(numeric),
                }
        per_param.append({"param": p.name or f"param{pi}", "max_rel_err": max_err})
    report = {"worst": worst, "per_param": per_param, "tolerance": tolerance}
    if worst["rel_err"] > tolerance:
        raise GradMismatch(
            f"gradient mismatch at {worst['param']}[{worst['coord']}]: "
            f"analytic {worst['analytic']:.6g} vs numeric {worst['numeric']:.6g} "
            f"(rel err {worst['rel_err']:.3g} > {tolerance:g})"
        )
    return report
