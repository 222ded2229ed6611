"""Differentiable primitives.

Spatial ops use the (batch, channel, frequency, time) layout.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, pad: int, stride: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(f"kernel extent {kernel} exceeds padded input {size + 2 * pad}")
    if span % stride:
        raise ValueError(
            f"non-integer output size: ({size} + 2*{pad} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    return make_result("mul", x * y, (a, b), lambda g: (g * y, g * x))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result("add_scalar", a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return make_result("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).astype(a.data.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", np.maximum(a.data, 0), (a,),
                       lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    ex = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype)
    # saturated values are pulled one ulp inside the open interval
    lo = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(s, lo, hi)
    return make_result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


# --------------------------------------------------------------------------
# dense


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (N, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return make_result("dense", xd @ wd + bias.data, (x, weight, bias), back)


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding=0, stride=1) -> Tensor:
    """2-D cross-correlation, kernels shaped (K, C, n, m)."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernels")
    N, C, H, W = x.shape
    K, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise ValueError(f"conv2d: input has {C} channels, kernels expect {Ck}")
    if bias.shape != (K,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({K},)")
    ph, pw = _pair(padding)
    sh, sw = _pair(stride)
    Ho = conv_output_size(H, kh, ph, sh)
    Wo = conv_output_size(W, kw, pw, sw)

    # Work in a (C, W, N, H) layout: the time axis is short, so keeping the
    # frequency axis innermost makes the patch copies long contiguous runs.
    xt = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))).transpose(1, 3, 0, 2))
    cols = _im2col(xt, kh, kw, Ho, Wo, sh, sw).reshape(C * kh * kw, Wo * N * Ho)
    wmat = kernels.data.reshape(K, -1)
    out = (wmat @ cols).reshape(K, Wo, N, Ho).transpose(2, 0, 3, 1) + bias.data[None, :, None, None]

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 3, 0, 2)).reshape(K, Wo * N * Ho)
        dw = (g2 @ cols.T).reshape(kernels.shape)
        db = g2.sum(axis=1)
        dx = None
        if x.tracked:
            dcols = (wmat.T @ g2).reshape(C, kh, kw, Wo, N, Ho)
            dxt = np.zeros(xt.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxt[:, j:j + sw * Wo:sw, :, i:i + sh * Ho:sh] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxt[:, pw:pw + W, :, ph:ph + H].transpose(2, 0, 3, 1))
        return dx, dw, db

    return make_result("conv2d", np.ascontiguousarray(out), (x, kernels, bias), back)


def _im2col(xt, kh, kw, Ho, Wo, sh, sw):
    """Patches of a (C, W, N, H) array laid out as (C, kh, kw, Wo, N, Ho)."""
    C, _, N, _ = xt.shape
    cols = np.empty((C, kh, kw, Wo, N, Ho), dtype=xt.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, j:j + sw * Wo:sw, :, i:i + sh * Ho:sh]
    return cols


# --------------------------------------------------------------------------
# pooling and resampling


def maxpool2d(x: Tensor, window=2, stride=None) -> Tensor:
    """Max over windows; ties route the gradient to the first element in row-major order."""
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    N, C, H, W = x.shape
    if kh > H or kw > W:
        raise ValueError(f"pool window {(kh, kw)} larger than input {(H, W)}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    out = arg = None
    for k in range(kh * kw):
        i, j = divmod(k, kw)
        cand = x.data[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
        if out is None:
            out, arg = cand.copy(), np.zeros(cand.shape, dtype=np.int32)
        else:
            # strict comparison keeps the first maximum on ties
            better = cand > out
            out = np.where(better, cand, out)
            arg[better] = k

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            dx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += np.where(arg == k, g, 0)
        return (dx,)

    return make_result("maxpool2d", out, (x,), back)


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights mapping ``src`` points onto ``dst``."""
    if dst < src:
        raise ValueError(f"cannot downscale {src} -> {dst}")
    R = np.zeros((dst, src))
    if src == 1:
        R[:, 0] = 1.0
        return R
    pos = np.arange(dst) * (src - 1) / (dst - 1) if dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    R[np.arange(dst), lo] = 1.0 - frac
    R[np.arange(dst), lo + 1] += frac
    return R


def upsample_bilinear(x: Tensor, size) -> Tensor:
    H, W = _pair(size)
    N, C, h, w = x.shape
    if H < h or W < w:
        raise ValueError(f"upsample target {(H, W)} smaller than input {(h, w)}")
    Ry = interpolation_matrix(h, H).astype(x.dtype)
    Rx = interpolation_matrix(w, W).astype(x.dtype)
    out = np.einsum("Yh,nchw,Xw->ncYX", Ry, x.data, Rx, optimize=True)
    return make_result("upsample_bilinear", out, (x,),
                       lambda g: (np.einsum("Yh,ncYX,Xw->nchw", Ry, g, Rx, optimize=True),))


# --------------------------------------------------------------------------
# loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in 0..{K - 1}")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(N), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(N), labels] -= 1.0
        return (d * (g / N),)

    return make_result("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), back)
