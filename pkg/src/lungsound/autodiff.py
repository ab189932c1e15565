"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor records the operation that produced it and its parents; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every ``requires_grad`` leaf. Only the primitives
needed by the network are implemented: elementwise arithmetic, matmul,
reductions, 2-d convolution/pooling, normalizations, dropout and attention.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidConfigError, InvalidInputError, UsageError

AXIS_NAMES = {"channel": 1, "frequency": 2, "time": 3}

_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backprop = None
        self._done = False

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.data.size != 1:
            raise InvalidInputError("backward() requires a scalar loss")
        if self._done:
            raise UsageError("backward() already ran on this graph")
        self._done = True

        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backprop is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._backprop is None:
                continue
            for parent, pg in zip(node._parents, node._backprop(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(-self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, backprop):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order[::-1]


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# -- elementwise primitives --------------------------------------------------


def add(a, b):
    def backprop(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backprop)


def mul(a, b):
    def backprop(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backprop)


def mul_scalar(a, s):
    return _node(a.data * s, (a,), lambda g: (g * s,))


def div(a, b):
    def backprop(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), backprop)


def power(a, p):
    return _node(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip_min(a, floor):
    """max(a, floor); gradient is zero in the clamped region."""
    mask = a.data > floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


# -- shape primitives ---------------------------------------------------------


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inverse = np.argsort(axes)
    return _node(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backprop(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate(datas, axis=axis), tuple(tensors), backprop)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    def backprop(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backprop)


def tmean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)]
    )
    return mul_scalar(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a, axis, keepdims=False):
    out_data = a.data.max(axis=axis, keepdims=True)
    mask = a.data == out_data
    counts = mask.sum(axis=axis, keepdims=True)

    def backprop(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask * (gg / counts),)

    return _node(out_data if keepdims else out_data.squeeze(axis), (a,), backprop)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidInputError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(
            f"matmul inner dims disagree: {a.shape} @ {b.shape}"
        )

    def backprop(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), backprop)


def dense(x, w, bias):
    """Affine map x @ w + bias."""
    return matmul(x, w) + bias


# -- convolution and pooling ---------------------------------------------------


def _same_pad(k):
    # extra padding goes on the high-index side for even kernels
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv2d(x, w, bias, padding="same"):
    """2-d cross-correlation, stride 1, over N×C×F×T input.

    w is O×C×Kf×Kt; bias is O. "same" preserves the spatial dims.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidInputError("conv2d expects 4-d input and kernel")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise InvalidInputError(f"channel mismatch: input {c}, kernel {cw}")
    if padding == "same":
        ph = _same_pad(kh)
        pw = _same_pad(kw)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise InvalidConfigError(f"unknown padding {padding!r}")
    if h + ph[0] + ph[1] < kh or wd + pw[0] + pw[1] < kw:
        raise InvalidInputError("kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    s = xp.strides
    cols = as_strided(
        xp, (n, c, kh, kw, ho, wo), (s[0], s[1], s[2], s[3], s[2], s[3])
    ).reshape(n, c * kh * kw, ho * wo)
    w2 = w.data.reshape(o, c * kh * kw)
    out = (np.matmul(w2, cols) + bias.data.reshape(o, 1)).reshape(n, o, ho, wo)

    def backprop(g):
        gflat = g.reshape(n, o, ho * wo).astype(cols.dtype, copy=False)
        gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = gflat.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, gflat).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
        gx = gxp[:, :, ph[0] : ph[0] + h, pw[0] : pw[0] + wd]
        return gx, gw, gb

    return _node(out, (x, w, bias), backprop)


def pool2d(x, mode, kernel, stride=None):
    """Window pooling over the two trailing axes; floor division drops
    remainders at the high edge."""
    kh, kw = kernel
    sh, sw = stride if stride is not None else kernel
    n, c, h, wd = x.shape
    if kh > h or kw > wd:
        raise InvalidConfigError(f"pool kernel {kernel} exceeds input {(h, wd)}")
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    xd = np.ascontiguousarray(x.data)
    s = xd.strides
    windows = as_strided(
        xd,
        (n, c, ho, wo, kh, kw),
        (s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
    ).reshape(n, c, ho, wo, kh * kw)

    if mode == "avg":
        out = windows.mean(axis=-1)

        def backprop(g):
            gx = np.zeros_like(xd)
            gs = g / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gs
            return (gx,)

    elif mode == "max":
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        def backprop(g):
            gx = np.zeros_like(xd)
            ni, ci, hi, wi = np.indices(idx.shape)
            np.add.at(
                gx,
                (ni, ci, hi * sh + idx // kw, wi * sw + idx % kw),
                g,
            )
            return (gx,)

    else:
        raise InvalidConfigError(f"unknown pool mode {mode!r}")
    return _node(out, (x,), backprop)


def global_avg_over(x, axis):
    """Collapse one named axis ("channel"/"frequency"/"time") by its mean."""
    return tmean(x, AXIS_NAMES[axis])


def global_max_over(x, axis):
    return tmax(x, AXIS_NAMES[axis])


# -- normalizations ------------------------------------------------------------


def batch_norm(x, gamma, beta, running_mean, running_var, momentum=0.1,
               training=True, eps=1e-5):
    """Per-channel batch normalization over an N×C×F×T tensor.

    `running_mean`/`running_var` are plain arrays mutated in place during
    training (biased batch variance, convention new = (1-m)·old + m·batch).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidInputError("batch_norm affine parameters must have length C")
    shape = (1, c, 1, 1)
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        var = tmean((x - mu) ** 2, axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c)
        xhat = (x - mu) * (var + eps) ** -0.5
    else:
        mu = running_mean.reshape(shape)
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x - mu) * inv
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def instance_norm_freq(x, eps=1e-5):
    """Normalize each (sample, channel, frequency-bin) row across time."""
    mu = tmean(x, axis=-1, keepdims=True)
    var = tmean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) * (var + eps) ** -0.5


# -- stochastic / nonlinear ----------------------------------------------------


def softmax(x, axis=-1):
    z = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(z)
    return e / tsum(e, axis=axis, keepdims=True)


def dropout(x, p, training, rng=None):
    if not 0.0 <= p < 1.0:
        raise InvalidConfigError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise InvalidInputError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


def multi_head_attention(x, wq, wk, wv, wo):
    """Self-attention over N×S×D input.

    wq/wk/wv are per-head lists of D×K projections; wo is (H·K)×D_out.
    """
    heads = []
    for q_w, k_w, v_w in zip(wq, wk, wv):
        key_dim = q_w.shape[-1]
        q = matmul(x, q_w)
        k = matmul(x, k_w)
        v = matmul(x, v_w)
        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(key_dim))
        heads.append(matmul(softmax(scores, axis=-1), v))
    return matmul(concat(heads, axis=-1), wo)


# -- verification --------------------------------------------------------------


def grad_check(fn, shapes, seed=0, h=1e-4):
    """Compare analytic grads of scalar-valued `fn` against central
    differences; returns the max relative error over all input elements."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward()

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[j] = orig - h
            lo = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[j] = orig
            numeric = (hi - lo) / (2 * h)
            a = analytic.reshape(-1)[j]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
