"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the transcription networks need are provided.  Image
tensors use the ``(batch, time, freq, channels)`` layout; conv kernels are
``(k_time, k_freq, c_in, c_out)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

BCE_EPS = 1e-7


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch(f"backward() without grad needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        topo = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _result(a.data + a.dtype.type(b), (a,), lambda g: (g,))
    b = _as_tensor(b, a)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    b = _as_tensor(b, a)
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def reduce_sum(a, axis=None):
    out = a.data.sum(axis=axis)
    out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(out, (a,), backward)


def reduce_mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def elu(x):
    """ELU with alpha = 1."""
    neg = x.data <= 0
    out = np.exp(np.minimum(x.data, 0))
    out -= 1
    np.copyto(out, x.data, where=~neg)
    return _result(out, (x,), lambda g: (np.where(neg, g * (out + 1), g),))


def sigmoid(x):
    out = expit(x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def relu(x):
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def relu_straight_through(x):
    """max(0, x) forward; the backward pass is the identity, as for a linear unit."""
    return _result(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g,))


def detach(x):
    """Same values, no gradient path to ``x``."""
    return Tensor(x.data, dtype=x.dtype)


def standard_normal(rng, shape, dtype=np.float32):
    """Standard normal samples by the Box-Muller transform of ``rng`` uniforms
    (cheaper than numpy's ziggurat for large float32 draws)."""
    dtype = np.dtype(dtype)
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u = rng.random((2, half), dtype=dtype)
    radius = np.log1p(-u[0])
    radius *= -2
    np.sqrt(radius, out=radius)
    theta = u[1]
    theta *= dtype.type(2 * np.pi)
    out = np.empty(2 * half, dtype)
    np.cos(theta, out=out[:half])
    np.sin(theta, out=out[half:])
    out[:half] *= radius
    out[half:] *= radius
    return out[:n].reshape(shape)


def gaussian_noise(x, mode, sigma, training, rng):
    """Multiplicative (``x * (1 + e)``) or additive (``x + e``) noise, e ~ N(0, sigma^2).

    Identity outside training or for ``sigma == 0``.
    """
    if not training or sigma == 0:
        return x
    if mode not in ("multiplicative", "additive"):
        raise ValueError(f"unknown noise mode {mode!r}")
    eps = standard_normal(rng, x.shape, x.dtype)
    eps *= x.dtype.type(sigma)
    if mode == "multiplicative":
        eps += 1
        return _result(x.data * eps, (x,), lambda g: (g * eps,))
    eps += x.data
    return _result(eps, (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        return gx, x.data.T @ g, g.sum(axis=0)
    return _result(out, (x, w, b), backward)


_CHUNK_BYTES = 1 << 19


def conv2d(x, w, b, stride=(1, 1)):
    """Valid-padding 2-D convolution (cross-correlation)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    sh, sw = stride
    if kh > h or kw > wd:
        raise ShapeMismatch(f"conv2d: kernel {w.shape[:2]} larger than input {x.shape[1:3]}")
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw][:, :ho, :wo]               # (n, ho, wo, c, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, co)
    out = (cols @ w2 + b.data).reshape(n, ho, wo, co)

    def backward(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            if sw == 1 and wo < kw:
                # few output columns: scatter whole kernel-width patches per (row, column)
                gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
                for i in range(kh):
                    for q in range(wo):
                        gx[:, i:i + sh * (ho - 1) + 1:sh, q:q + kw] += gcols[:, :, q, i]
            else:
                # batch chunks keep the strided accumulation cache-resident
                wt = [[np.ascontiguousarray(w.data[i, j].T) for j in range(kw)] for i in range(kh)]
                step = max(1, _CHUNK_BYTES // max(1, gx[0].nbytes))
                for s in range(0, n, step):
                    gc, gxc = g[s:s + step], gx[s:s + step]
                    for i in range(kh):
                        for j in range(kw):
                            gxc[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gc @ wt[i][j]
        return gx, gw, gb
    return _result(out, (x, w, b), backward)


def max_pool2d(x, pool=(1, 2)):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties route the gradient to the first maximal element of the window.
    """
    n, h, wd, c = x.shape
    ph, pw = pool
    ho, wo = h // ph, wd // pw
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"max_pool2d: pool {pool} larger than input {x.shape[1:3]}")
    out = None
    winner = np.zeros((n, ho, wo, c), dtype=np.intp)
    for k in range(ph * pw):
        i, j = divmod(k, pw)
        cand = x.data[:, i:ho * ph:ph, j:wo * pw:pw]
        if out is None:
            out = cand.copy()
            continue
        better = cand > out
        np.copyto(out, cand, where=better)
        winner[better] = k

    def backward(g):
        gx = np.zeros_like(x.data)
        for k in range(ph * pw):
            i, j = divmod(k, pw)
            gx[:, i:ho * ph:ph, j:wo * pw:pw] = np.where(winner == k, g, 0)
        return (gx,)
    return _result(out, (x,), backward)


def stitch(alpha, zs, m, detached=False):
    """One output of a cross-stitch unit: ``sum_j alpha[m, j] * zs[j]``.

    With ``detached`` the terms ``j != m`` are treated as constants, so no
    gradient reaches the other towers; ``alpha`` is trainable either way.
    """
    shape = zs[0].shape
    for z in zs:
        _check_same(zs[0], z, "stitch")
    if alpha.shape != (len(zs), len(zs)):
        raise ShapeMismatch(f"stitch: alpha {alpha.shape} for {len(zs)} inputs")
    a = alpha.data
    out = np.zeros(shape, dtype=zs[0].dtype)
    for j, z in enumerate(zs):
        out += a[m, j] * z.data

    def backward(g):
        galpha = np.zeros_like(a)
        for j, z in enumerate(zs):
            galpha[m, j] = np.vdot(g, z.data)
        gz = [a[m, j] * g if (j == m or not detached) else None for j in range(len(zs))]
        return [galpha] + gz
    return _result(out, [alpha] + list(zs), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(p, target, eps=BCE_EPS):
    """Mean BCE of probabilities ``p`` (clamped to ``[eps, 1 - eps]``)."""
    y = np.asarray(target, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeMismatch(f"bce: prediction {p.shape}, target {y.shape}")
    inside = (p.data > eps) & (p.data < 1 - eps)
    q = np.clip(p.data, eps, 1 - eps)
    loss = -(y * np.log(q) + (1 - y) * np.log1p(-q)).mean()

    def backward(g):
        return (np.where(inside, g * (q - y) / (q * (1 - q)) / y.size, 0).astype(p.dtype),)
    return _result(np.asarray(loss, dtype=p.dtype), (p,), backward)


def squared_error(pred, target, mask=None):
    """Mean of ``(pred - target) ** 2`` over all (or ``mask``-selected) cells."""
    y = np.asarray(target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeMismatch(f"squared_error: prediction {pred.shape}, target {y.shape}")
    diff = pred.data - y
    if mask is not None:
        mask = np.asarray(mask, dtype=pred.dtype)
        count = max(float(mask.sum()), 1.0)
        diff = diff * mask
    else:
        count = y.size
    loss = (diff * diff).sum() / count

    def backward(g):
        return (g * 2 * diff / pred.dtype.type(count),)
    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def glorot_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform(shape, rng, dtype=np.float32):
    """Glorot/Xavier uniform; conv kernels ``(kh, kw, c_in, c_out)`` count the receptive field."""
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_in, fan_out = shape[0], shape[1]
    a = glorot_bound(fan_in, fan_out)
    return rng.uniform(-a, a, size=shape).astype(dtype)
