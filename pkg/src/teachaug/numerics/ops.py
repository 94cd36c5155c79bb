"""Differentiable operations with explicit backward rules.

Each function computes its forward value in numpy and hands a closure with
the vector-Jacobian product to :func:`make_result`. Constants (python
scalars, ndarrays) may be mixed freely with tensors and never receive
gradients.
"""
from __future__ import annotations

import builtins

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, make_result

LOG_EPS_COMPLEMENT = float(np.log(1e-12))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Promote constants to tensors without widening a float32 partner."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype) if np.isscalar(b) else np.asarray(b))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype) if np.isscalar(a) else np.asarray(a)), b
    return Tensor(a), Tensor(b)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return make_result(np.broadcast_to(x.data, shape), (x,),
                       lambda g: (_unbroadcast(g, x.shape),))


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return make_result(x.data[index], (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_along_axis(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis with an integer index array (e.g. an argsort)."""

    def backward(g):
        gx = np.zeros_like(x.data)
        grid = list(np.indices(idx.shape, sparse=True))
        grid[axis] = idx
        np.add.at(gx, tuple(grid), g)
        return (gx,)

    return make_result(np.take_along_axis(x.data, idx, axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    """Absolute value; the subgradient at 0 is taken as 0."""
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope <= 1.0:
        raise ConfigError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    scaled = x.data * x.dtype.type(slope)
    out = np.maximum(x.data, scaled)     # max(x, s x) for s <= 1

    def backward(g):
        # arithmetic mask: np.where on a random sign pattern is ~10x slower
        factor = (x.data > 0).astype(g.dtype)
        factor *= g.dtype.type(1.0 - slope)
        factor += g.dtype.type(slope)
        return (g * factor,)

    return make_result(out, (x,), backward)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # exp(-|v|) never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), stable for large |x|."""
    v = x.data
    out = np.minimum(v, 0) - np.log1p(np.exp(-np.abs(v)))
    return make_result(out, (x,), lambda g: (g * (1.0 - _sigmoid_np(v)),))


def _bernoulli_keep(rng: np.random.Generator, shape, drop_ratio: float) -> np.ndarray:
    """Keep-mask from 16-bit slices of raw generator output.

    The keep probability is quantized to a multiple of 2^-16, which is far
    below anything a training run can resolve and several times cheaper than
    drawing floats.
    """
    n = int(np.prod(shape))
    raw = rng.bit_generator.random_raw((n + 3) // 4).view(np.uint16)[:n]
    return (raw >= np.uint16(min(round(drop_ratio * 65536), 65535))).reshape(shape)


def dropout(x: Tensor, drop_ratio: float, rng: np.random.Generator | None,
            training: bool = True) -> Tensor:
    """Inverted dropout. Eval mode and ``drop_ratio == 0`` return ``x`` itself."""
    if not 0.0 <= drop_ratio < 1.0:
        raise ConfigError(f"drop_ratio must lie in [0, 1), got {drop_ratio}")
    if not training or drop_ratio == 0.0:
        return x
    keep = _bernoulli_keep(rng, x.shape, drop_ratio) * x.dtype.type(1.0 / (1.0 - drop_ratio))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


# triangle wave ---------------------------------------------------------------
def triangle_wave_slope(folded: np.ndarray) -> np.ndarray:
    """d t/d x given ``folded = x mod 2``; fold points take the left limit."""
    return np.where((folded > 0) & (folded <= 1), 1.0, -1.0).astype(folded.dtype)


def triangle_wave(x: Tensor) -> Tensor:
    """t(x) = arccos(cos(pi x)) / pi evaluated piecewise (exact on [0, 1])."""
    folded = np.mod(x.data, 2.0)
    out = np.where(folded <= 1.0, folded, 2.0 - folded)
    slope = triangle_wave_slope(folded)
    return make_result(out, (x,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------
def _logsumexp_np(v: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return s if keepdims else np.squeeze(s, axis=axis)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    lse = _logsumexp_np(x.data, axis=axis, keepdims=True)
    soft = np.exp(x.data - lse)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - _logsumexp_np(x.data, axis=axis, keepdims=True)
    soft = np.exp(out)

    def backward(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = np.exp(x.data - _logsumexp_np(x.data, axis=axis, keepdims=True))

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(v - _logsumexp_np(v, axis=axis, keepdims=True))


def log_softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return v - _logsumexp_np(v, axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -sum_k y_k log softmax(logits)_k for [B, K] inputs."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and labels {y.shape} must both be [B, K]")
    y = y.astype(logits.dtype, copy=False)
    logp = logits.data - _logsumexp_np(logits.data, axis=-1, keepdims=True)
    batch = logits.shape[0]
    loss = -np.sum(y * logp) / batch

    def backward(g):
        soft = np.exp(logp)
        return (g * (soft * y.sum(axis=-1, keepdims=True) - y) / batch,)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def log1m_softmax(logits: Tensor, floor: float = LOG_EPS_COMPLEMENT) -> Tensor:
    """Elementwise log(1 - softmax(logits)) over the last axis.

    Uses log(1 - f_k) = logsumexp_{j != k} z_j - logsumexp_j z_j. Values below
    ``floor`` are clamped (zero gradient there).
    """
    z = logits.data
    k = z.shape[-1]
    off_diag = np.where(np.eye(k, dtype=bool), -np.inf, 0.0).astype(z.dtype)
    masked = z[..., None, :] + off_diag          # [..., k (excluded), k (summed)]
    lse_comp = _logsumexp_np(masked, axis=-1)    # [..., k]
    lse = _logsumexp_np(z, axis=-1, keepdims=True)
    raw = lse_comp - lse
    active = raw > floor
    out = np.where(active, raw, floor).astype(z.dtype)

    def backward(g):
        soft = np.exp(z - lse)                                   # f_j
        comp = np.exp(masked - lse_comp[..., None])              # c_k(j), zero at j == k
        gk = np.where(active, g, 0.0)
        gz = np.einsum("...k,...kj->...j", gk, comp) - gk.sum(axis=-1, keepdims=True) * soft
        return (gz.astype(z.dtype, copy=False),)

    return make_result(out, (logits,), backward)


# ---------------------------------------------------------------------------
# image ops (NHWC layout)
# ---------------------------------------------------------------------------
def affine_resample(image: Tensor, residual: Tensor) -> Tensor:
    """Inverse-warp ``image`` [B,H,W,C] by the affine matrix ``I + residual``.

    Coordinates are normalized to [-1, 1] with pixel centres at
    (2j + 1)/W - 1. Sampling is bilinear with zeros outside the frame. The
    source position is computed as ``index + offset`` so a zero residual hits
    pixel centres exactly and reproduces the input bit-for-bit. Where a source
    coordinate lands exactly on a pixel centre the coordinate derivative is the
    symmetric (central) one, which is what a central finite difference sees.
    """
    x, a = image.data, residual.data
    if x.ndim != 4 or a.shape != (x.shape[0], 2, 3):
        raise DimensionError(f"affine_resample wants [B,H,W,C] and [B,2,3], got {x.shape}, {a.shape}")
    b, h, w, c = x.shape
    dt = x.dtype
    xn = ((2.0 * np.arange(w) + 1.0) / w - 1.0).astype(dt)   # [W]
    yn = ((2.0 * np.arange(h) + 1.0) / h - 1.0).astype(dt)   # [H]
    a = a.astype(dt, copy=False)
    off_x = (a[:, 0, 0, None, None] * xn[None, None, :] + a[:, 0, 1, None, None] * yn[None, :, None]
             + a[:, 0, 2, None, None]) * (w / 2.0)
    off_y = (a[:, 1, 0, None, None] * xn[None, None, :] + a[:, 1, 1, None, None] * yn[None, :, None]
             + a[:, 1, 2, None, None]) * (h / 2.0)
    sx = np.arange(w, dtype=dt)[None, None, :] + off_x      # [B,H,W]
    sy = np.arange(h, dtype=dt)[None, :, None] + off_y
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = (sx - x0f).astype(dt)
    fy = (sy - y0f).astype(dt)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    flat = x.reshape(b * h * w, c)
    bidx = np.arange(b)[:, None, None] * (h * w)

    def fetch(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = bidx + np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        vals = flat[idx]                     # [B,H,W,C]
        if not valid.all():
            vals[~valid] = 0
        return vals, idx, valid

    v00, i00, m00 = fetch(y0, x0)
    v01, i01, m01 = fetch(y0, x0 + 1)
    v10, i10, m10 = fetch(y0 + 1, x0)
    v11, i11, m11 = fetch(y0 + 1, x0 + 1)
    wx1, wy1 = fx[..., None], fy[..., None]
    wx0, wy0 = 1 - wx1, 1 - wy1
    out = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)

    def backward(g):
        gimg = None
        gres = None
        if image.requires_grad:
            acc = np.zeros((b * h * w, c), dtype=np.float64)
            for wgt, idx, valid in ((wy0 * wx0, i00, m00), (wy0 * wx1, i01, m01),
                                    (wy1 * wx0, i10, m10), (wy1 * wx1, i11, m11)):
                contrib = (g * wgt * valid[..., None]).reshape(-1, c)
                flat_idx = idx.reshape(-1)
                for ch in range(c):
                    acc[:, ch] += np.bincount(flat_idx, weights=contrib[:, ch], minlength=b * h * w)
            gimg = acc.astype(dt).reshape(x.shape)
        if residual.requires_grad:
            on_x = (fx == 0)[..., None]
            on_y = (fy == 0)[..., None]
            vm0, _, _ = fetch(y0, x0 - 1)
            vm1, _, _ = fetch(y0 + 1, x0 - 1)
            v0m, _, _ = fetch(y0 - 1, x0)
            v1m, _, _ = fetch(y0 - 1, x0 + 1)
            # d out / d sx
            left0 = np.where(on_x, vm0, v00)
            left1 = np.where(on_x, vm1, v10)
            sxs = np.where(on_x, 0.5, 1.0).astype(dt)
            dsx = sxs * (wy0 * (v01 - left0) + wy1 * (v11 - left1))
            # d out / d sy
            up0 = np.where(on_y, v0m, v00)
            up1 = np.where(on_y, v1m, v01)
            sys_ = np.where(on_y, 0.5, 1.0).astype(dt)
            dsy = sys_ * (wx0 * (v10 - up0) + wx1 * (v11 - up1))
            gsx = np.sum(g * dsx, axis=-1) * (w / 2.0)   # [B,H,W]
            gsy = np.sum(g * dsy, axis=-1) * (h / 2.0)
            gres = np.empty((b, 2, 3), dtype=dt)
            gres[:, 0, 0] = np.einsum("bhw,w->b", gsx, xn)
            gres[:, 0, 1] = np.einsum("bhw,h->b", gsx, yn)
            gres[:, 0, 2] = gsx.sum(axis=(1, 2))
            gres[:, 1, 0] = np.einsum("bhw,w->b", gsy, xn)
            gres[:, 1, 1] = np.einsum("bhw,h->b", gsy, yn)
            gres[:, 1, 2] = gsy.sum(axis=(1, 2))
            gres = gres.astype(residual.dtype, copy=False)
        return gimg, gres

    return make_result(out.astype(dt, copy=False), (image, residual), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 convolution, x [B,H,W,Cin], weight [kh,kw,Cin,Cout].

    Columns come from a sliding-window view laid out in (kh, kw, Cin) order so that
    the weight reshapes to the GEMM operand without a transpose.
    """
    b, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [B,Ho,Wo,Cin,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b * ho * wo, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(b, ho, wo, kh * kw, cin)
            # tap-major copy: contiguous slabs make the shifted adds cheap when cin is small
            gcols = np.ascontiguousarray(gcols.transpose(3, 0, 1, 2, 4))
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[i * kw + j]
            gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first max
    in row-major window order."""
    b, h, w, c = x.shape
    if h % size or w % size:
        raise DimensionError(f"maxpool2d: {h}x{w} not divisible by {size}")
    views = [x.data[:, i::size, j::size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    taken = np.zeros(out.shape, dtype=bool)
    winners = []
    for v in views:
        hit = (v == out) & ~taken
        taken |= hit
        winners.append(hit)

    def backward(g):
        gx = np.zeros_like(x.data)
        k = 0
        for i in range(size):
            for j in range(size):
                gx[:, i::size, j::size] = g * winners[k]
                k += 1
        return (gx,)

    return make_result(out, (x,), backward)
