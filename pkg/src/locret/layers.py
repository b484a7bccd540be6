"""Dense-tensor differentiable layer kit.

Feature maps are numpy arrays laid out row-major as (height, width,
channels); vectors are rank-1. Every layer is a pair of pure functions:
``forward(x) -> (y, cache)`` and ``backward(cache, gy) -> (gx, param_grads)``.
Parameters live on the layer object as float64 arrays and are only mutated
by an optimizer between steps; forward/backward never write to them.

All tests run in float64. 32-bit storage is allowed on inference paths
(see :mod:`locret.ckt`) with tolerances relaxed to 1e-3.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when an operation is applied to incompatible shapes."""


def softplus(x: Array) -> Array:
    """Elementwise ln(1 + e^x), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def sigmoid(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_f64(x: Array) -> Array:
    return np.asarray(x, dtype=np.float64)


class Layer:
    """Base protocol: parameters plus a forward/backward pair."""

    def params(self) -> dict[str, Array]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: Array, kh: int, kw: int, stride: int, dilation: int, oh: int, ow: int) -> Array:
    """Gather (oh*ow, kh*kw*c) patch matrix from a padded (h, w, c) map."""
    c = xp.shape[2]
    cols = np.empty((oh, ow, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            cols[:, :, i, j, :] = xp[
                ii : ii + (oh - 1) * stride + 1 : stride,
                jj : jj + (ow - 1) * stride + 1 : stride,
                :,
            ]
    return cols.reshape(oh * ow, kh * kw * c)


def _col2im(gcols: Array, shape, kh, kw, stride, dilation, oh, ow) -> Array:
    """Scatter-add the transpose of :func:`_im2col`."""
    hp, wp, c = shape
    gx = np.zeros((hp, wp, c), dtype=np.float64)
    g = gcols.reshape(oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            gx[
                ii : ii + (oh - 1) * stride + 1 : stride,
                jj : jj + (ow - 1) * stride + 1 : stride,
                :,
            ] += g[:, :, i, j, :]
    return gx


class Conv2d(Layer):
    """Direct 2-D cross-correlation.

    Kernel shape is (out, in, kh, kw); the map layout is (h, w, c).
    Supports stride, symmetric zero padding and dilation.
    """

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int = 1,
                 padding: int = 0, dilation: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None):
        self.in_ch, self.out_ch, self.ksize = in_ch, out_ch, ksize
        self.stride, self.padding, self.dilation = stride, padding, dilation
        if rng is None:
            rng = np.random.default_rng(0)
        fan_in = in_ch * ksize * ksize
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, ksize, ksize))
        self.b = np.zeros(out_ch) if bias else None

    def params(self):
        p = {"w": self.w}
        if self.b is not None:
            p["b"] = self.b
        return p

    def _out_extent(self, n: int) -> int:
        eff = (self.ksize - 1) * self.dilation + 1
        return (n + 2 * self.padding - eff) // self.stride + 1

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 3:
            raise ShapeError(f"conv2d expects rank-3 (h, w, c) input, got rank {x.ndim}")
        if x.shape[2] != self.in_ch:
            raise ShapeError(f"conv2d: input has {x.shape[2]} channels, kernel expects {self.in_ch}")
        h, w, _ = x.shape
        oh, ow = self._out_extent(h), self._out_extent(w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: output extent ({oh}, {ow}) collapses for input {x.shape}")
        p = self.padding
        xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
        cols = _im2col(xp, self.ksize, self.ksize, self.stride, self.dilation, oh, ow)
        # weight matrix ordered to match (kh, kw, c) patch layout
        wmat = self.w.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        y = cols @ wmat.T
        if self.b is not None:
            y = y + self.b
        y = y.reshape(oh, ow, self.out_ch)
        return y, (xp.shape, cols, oh, ow)

    def backward(self, cache, gy):
        xp_shape, cols, oh, ow = cache
        gy = _as_f64(gy).reshape(oh * ow, self.out_ch)
        wmat = self.w.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        gw = (gy.T @ cols).reshape(self.out_ch, self.ksize, self.ksize, self.in_ch)
        gw = gw.transpose(0, 3, 1, 2)
        gcols = gy @ wmat
        gxp = _col2im(gcols, xp_shape, self.ksize, self.ksize, self.stride, self.dilation, oh, ow)
        p = self.padding
        gx = gxp[p : xp_shape[0] - p, p : xp_shape[1] - p, :] if p else gxp
        grads = {"w": gw}
        if self.b is not None:
            grads["b"] = gy.sum(axis=0)
        return gx, grads


def conv2d(x: Array, kernel: Array, stride: int = 1, padding: int = 0,
           bias: Array | None = None, dilation: int = 1) -> Array:
    """One-shot cross-correlation with an explicit (out, in, kh, kw) kernel."""
    kernel = _as_f64(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be rank 4 (out, in, kh, kw), got rank {kernel.ndim}")
    out_ch, in_ch, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    layer = Conv2d(in_ch, out_ch, kh, stride=stride, padding=padding,
                   dilation=dilation, bias=bias is not None)
    layer.w = kernel
    if bias is not None:
        layer.b = _as_f64(bias)
    y, _ = layer.forward(x)
    return y


# ---------------------------------------------------------------------------
# elementwise and pooling


class ReLU(Layer):
    def forward(self, x):
        x = _as_f64(x)
        return np.maximum(x, 0.0), (x > 0)

    def backward(self, cache, gy):
        return _as_f64(gy) * cache, {}


class Softplus(Layer):
    def forward(self, x):
        x = _as_f64(x)
        return softplus(x), x

    def backward(self, cache, gy):
        return _as_f64(gy) * sigmoid(cache), {}


class MinMaxNorm(Layer):
    """Linear rescale of a rank-2 map to [0, 1].

    A constant map has no dynamic range; it normalizes to all zeros (the
    map then carries no localization signal). Ties at the extremes take
    the first occurrence in row-major order as the min/max location.
    """

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 2:
            raise ShapeError(f"minmax norm expects a rank-2 map, got rank {x.ndim}")
        lo, hi = float(x.min()), float(x.max())
        if hi - lo == 0.0:
            return np.zeros_like(x), None
        y = (x - lo) / (hi - lo)
        imin = np.unravel_index(int(np.argmin(x)), x.shape)
        imax = np.unravel_index(int(np.argmax(x)), x.shape)
        return y, (y, hi - lo, imin, imax)

    def backward(self, cache, gy):
        gy = _as_f64(gy)
        if cache is None:
            return np.zeros_like(gy), {}
        y, rng, imin, imax = cache
        gx = gy / rng
        # d(min)/dx and d(max)/dx concentrate on the extreme locations
        gx[imin] -= gy.sum() / rng
        total = (gy * y).sum() / rng
        gx[imax] -= total
        gx[imin] += total
        return gx, {}


class AvgPool2(Layer):
    """2x2 stride-2 average pooling with ceil-mode edges.

    Edge windows that overhang the input average over the cells actually
    present, so the output extent is ceil(n / 2) on each axis.
    """

    def forward(self, x):
        x = _as_f64(x)
        h, w, c = x.shape
        oh, ow = (h + 1) // 2, (w + 1) // 2
        ph, pw = oh * 2 - h, ow * 2 - w
        xp = np.pad(x, ((0, ph), (0, pw), (0, 0)))
        counts = np.pad(np.ones((h, w)), ((0, ph), (0, pw)))
        blocks = xp.reshape(oh, 2, ow, 2, c)
        nblk = counts.reshape(oh, 2, ow, 2).sum(axis=(1, 3))
        y = blocks.sum(axis=(1, 3)) / nblk[:, :, None]
        return y, (x.shape, nblk)

    def backward(self, cache, gy):
        (h, w, c), nblk = cache
        gy = _as_f64(gy)
        oh, ow = gy.shape[:2]
        g = (gy / nblk[:, :, None])[:, None, :, None, :]
        gxp = np.broadcast_to(g, (oh, 2, ow, 2, c)).reshape(oh * 2, ow * 2, c)
        return gxp[:h, :w, :].copy(), {}


class GeMPool(Layer):
    """Generalized-mean spatial pooling: per channel (mean x^p)^(1/p).

    Inputs are clamped at zero first. Computed in log space so large p
    (max-pool limit) stays finite.
    """

    def __init__(self, p: float = 3.0, eps: float = 1e-12):
        if p < 1:
            raise ValueError(f"gem exponent must be >= 1, got {p}")
        self.p = float(p)
        self.eps = eps

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 3:
            raise ShapeError(f"gem pool expects rank-3 input, got rank {x.ndim}")
        h, w, c = x.shape
        xc = np.maximum(x, self.eps)
        n = h * w
        lx = np.log(xc.reshape(n, c))
        m = lx.max(axis=0)
        ly = m + (np.log(np.exp(self.p * (lx - m)).sum(axis=0)) - np.log(n)) / self.p
        return np.exp(ly), (x, xc, ly)

    def backward(self, cache, gy):
        x, xc, ly = cache
        gy = _as_f64(gy)
        h, w, c = x.shape
        n = h * w
        # dy/dx = x^(p-1) * y^(1-p) / n, zero where the clamp was active
        g = np.exp((self.p - 1.0) * (np.log(xc) - ly[None, None, :])) / n
        gx = gy[None, None, :] * g
        gx[x < self.eps] = 0.0
        return gx, {}


def gem_pool(x: Array, p: float) -> Array:
    """Functional GeM pooling of a (h, w, c) map to a c-vector."""
    y, _ = GeMPool(p).forward(x)
    return y


class L2Normalize(Layer):
    def __init__(self, eps: float = 1e-12):
        self.eps = eps

    def forward(self, x):
        x = _as_f64(x)
        norm = float(np.linalg.norm(x))
        if norm < self.eps:
            raise ValueError("cannot normalize a (near-)zero vector")
        y = x / norm
        return y, (y, norm)

    def backward(self, cache, gy):
        y, norm = cache
        gy = _as_f64(gy)
        return (gy - y * float((gy * y).sum())) / norm, {}


class Linear(Layer):
    """Affine map of a rank-1 vector."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.w = rng.normal(0.0, np.sqrt(1.0 / in_dim), size=(out_dim, in_dim))
        self.b = np.zeros(out_dim) if bias else None

    def params(self):
        p = {"w": self.w}
        if self.b is not None:
            p["b"] = self.b
        return p

    def forward(self, x):
        x = _as_f64(x)
        if x.shape != (self.w.shape[1],):
            raise ShapeError(f"linear: expected vector of {self.w.shape[1]}, got {x.shape}")
        y = self.w @ x
        if self.b is not None:
            y = y + self.b
        return y, x

    def backward(self, cache, gy):
        x = cache
        gy = _as_f64(gy)
        grads = {"w": np.outer(gy, x)}
        if self.b is not None:
            grads["b"] = gy.copy()
        return self.w.T @ gy, grads


class RMSNorm(Layer):
    """RMS normalization with per-channel learnable gain and shift.

    Divides by the root-mean-square without centering, so relative
    magnitudes survive; stateless (no running statistics), so training and
    inference agree. ``per_channel=True`` normalizes each channel by its
    own spatial RMS; ``per_channel=False`` uses one scalar RMS over the
    whole map, so learned per-channel gains still reweight channels
    relative to each other downstream.
    """

    def __init__(self, channels: int, eps: float = 1e-5, per_channel: bool = True):
        self.gain = np.ones(channels)
        self.shift = np.zeros(channels)
        self.eps = eps
        self.per_channel = per_channel

    def params(self):
        return {"gain": self.gain, "shift": self.shift}

    def forward(self, x):
        x = _as_f64(x)
        h, w, c = x.shape
        if self.per_channel:
            ms = (x * x).mean(axis=(0, 1))
            n = h * w
        else:
            ms = (x * x).mean()
            n = h * w * c
        inv = 1.0 / np.sqrt(ms + self.eps)
        xhat = x * inv
        return xhat * self.gain + self.shift, (x, xhat, inv, n)

    def backward(self, cache, gy):
        x, xhat, inv, n = cache
        gy = _as_f64(gy)
        gxhat = gy * self.gain
        if self.per_channel:
            dot = (gxhat * x).sum(axis=(0, 1))
        else:
            dot = (gxhat * x).sum()
        gx = gxhat * inv - x * (inv ** 3) * dot / n
        return gx, {"gain": (gy * xhat).sum(axis=(0, 1)), "shift": gy.sum(axis=(0, 1))}


class ChannelNorm(Layer):
    """Per-channel spatial standardization with learnable gain and shift.

    Stateless (no running statistics), so training and inference agree and
    runs are deterministic.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = np.ones(channels)
        self.shift = np.zeros(channels)
        self.eps = eps

    def params(self):
        return {"gain": self.gain, "shift": self.shift}

    def forward(self, x):
        x = _as_f64(x)
        h, w, c = x.shape
        mu = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        y = xhat * self.gain + self.shift
        return y, (xhat, inv, h * w)

    def backward(self, cache, gy):
        xhat, inv, n = cache
        gy = _as_f64(gy)
        gxhat = gy * self.gain
        gsum = gxhat.sum(axis=(0, 1))
        gdot = (gxhat * xhat).sum(axis=(0, 1))
        gx = (gxhat - gsum / n - xhat * gdot / n) * inv
        return gx, {"gain": (gy * xhat).sum(axis=(0, 1)), "shift": gy.sum(axis=(0, 1))}


# ---------------------------------------------------------------------------
# fusion and losses


class Fuse(Layer):
    """Learnable convex combination of same-shape tensors.

    Output is sum(w_i X_i) / sum(w_i) with w_i the softplus of a learnable
    scalar per input, so weights stay positive and normalized weights sum
    to one.
    """

    def __init__(self, count: int, init: float = 0.0):
        if count < 1:
            raise ValueError("fuse needs at least one input")
        self.alphas = np.full(count, float(init))

    def params(self):
        return {"alphas": self.alphas}

    def forward(self, xs):
        if len(xs) != len(self.alphas):
            raise ShapeError(f"fuse built for {len(self.alphas)} inputs, got {len(xs)}")
        xs = [_as_f64(x) for x in xs]
        shape = xs[0].shape
        for x in xs[1:]:
            if x.shape != shape:
                raise ShapeError("fuse inputs must share one shape")
        w = softplus(self.alphas)
        total = float(w.sum())
        y = sum(wi * x for wi, x in zip(w, xs)) / total
        return y, (xs, w, total, y)

    def backward(self, cache, gy):
        xs, w, total, y = cache
        gy = _as_f64(gy)
        gxs = [gy * (wi / total) for wi in w]
        s = sigmoid(self.alphas)
        galpha = np.array([float((gy * (x - y)).sum()) * si / total
                           for x, si in zip(xs, s)])
        return gxs, {"alphas": galpha}


def fuse(tensors: list[Array], alphas: list[float] | Array) -> Array:
    """Functional convex fusion with explicit weight parameters."""
    if len(tensors) == 0:
        raise ValueError("fuse needs at least one tensor")
    if len(tensors) != len(alphas):
        raise ShapeError(f"{len(tensors)} tensors but {len(alphas)} weight parameters")
    layer = Fuse(len(tensors))
    layer.alphas = _as_f64(np.asarray(alphas, dtype=np.float64))
    y, _ = layer.forward(tensors)
    return y


class SoftmaxCrossEntropy(Layer):
    """Cross-entropy over logits for a single integer target."""

    def __init__(self, target: int):
        self.target = int(target)

    def forward(self, logits):
        z = _as_f64(logits)
        m = float(z.max())
        lse = m + np.log(np.exp(z - m).sum())
        probs = np.exp(z - lse)
        loss = lse - float(z[self.target])
        return np.float64(loss), probs

    def backward(self, cache, gy):
        probs = cache
        g = probs.copy()
        g[self.target] -= 1.0
        return g * float(gy), {}
