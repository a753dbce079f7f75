"""Numeric kernels (forward and backward) for every graph op kind.

All activations are NHWC numpy arrays. Each ``*_forward`` returns the
output plus a cache consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PADDINGS = ("valid", "same")

# test hook: names of deliberately broken code paths, see inject_fault()
_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Temporarily enable a known-bad code path (used to prove the checks can fail)."""
    if name not in ("conv_stride",):
        raise ValueError(f"unknown fault {name!r}")
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


@dataclass(frozen=True)
class ConvAttrs:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "valid"
    out_channels: int = 1
    use_bias: bool = False

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.out_channels) < 1:
            raise ValueError(f"invalid conv attrs {self}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}")


@dataclass(frozen=True)
class PoolAttrs:
    window_h: int
    window_w: int
    stride: int
    kind: str = "max"
    padding: str = "valid"

    def __post_init__(self):
        if min(self.window_h, self.window_w, self.stride) < 1:
            raise ValueError(f"invalid pool attrs {self}")
        if self.kind not in ("max", "avg"):
            raise ValueError("pool kind must be 'max' or 'avg'")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}")


@dataclass(frozen=True)
class BatchNormAttrs:
    epsilon: float = 1e-3
    momentum: float = 0.99
    mode: str = "train"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("batchnorm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batchnorm momentum must lie in (0, 1)")


# -- geometry ---------------------------------------------------------------

def out_size(n: int, k: int, stride: int, padding: str) -> int:
    """Output extent along one axis; valid: floor((n-k)/s)+1, same: ceil(n/s)."""
    if padding == "same":
        return -(-n // stride)
    if k > n:
        raise ValueError(f"kernel extent {k} exceeds input extent {n}")
    return (n - k) // stride + 1


def pad_amounts(n: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _pad(x, kh, kw, stride, padding, value=0.0):
    _, h, w, _ = x.shape
    ph = pad_amounts(h, kh, stride, padding)
    pw = pad_amounts(w, kw, stride, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x, ph, pw
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=value)
    return xp, ph, pw


def _windows(xp, kh, kw, stride):
    # [B, Ho, Wo, C, kh, kw] strided view
    return sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def _scatter_windows(dxp, parts, kh, kw, stride, ho, wo):
    """Add ``parts[..., i, j, :]`` back onto every window position of ``dxp``."""
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += parts[:, :, :, i, j, :]


# -- convolution ------------------------------------------------------------

def conv2d_forward(x, w, b, attrs: ConvAttrs):
    bsz, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if (kh, kw) != (attrs.kernel_h, attrs.kernel_w) or cout != attrs.out_channels:
        raise ValueError(f"weights {w.shape} do not match {attrs}")
    if wcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {wcin}")
    s = attrs.stride
    ho = out_size(h, kh, s, attrs.padding)
    wo = out_size(wd, kw, s, attrs.padding)
    xp, ph, pw = _pad(x, kh, kw, s, attrs.padding)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError("kernel larger than padded input")
    cols = _windows(xp, kh, kw, s).transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, cout)
    if b is not None:
        y += b
    y = y.reshape(bsz, ho, wo, cout)
    return y, (x.shape, xp.shape, ph, pw, cols, w)


def conv2d_backward(g, cache, attrs: ConvAttrs):
    """Return (grad_input, grad_weights, grad_bias or None)."""
    xshape, xpshape, ph, pw, cols, w = cache
    kh, kw, cin, cout = w.shape
    bsz, ho, wo, gc = g.shape
    if gc != cout or (bsz, ho, wo) != (xshape[0], g.shape[1], g.shape[2]):
        raise ValueError("gradient shape inconsistent with forward")
    g2 = g.reshape(-1, cout)
    grad_w = (cols.T @ g2).reshape(kh, kw, cin, cout)
    grad_b = g2.sum(axis=0) if attrs.use_bias else None
    gcols = (g2 @ w.reshape(-1, cout).T).reshape(bsz, ho, wo, kh, kw, cin)
    s = attrs.stride
    if "conv_stride" in _faults:
        s += 1
    hp, wp = xpshape[1], xpshape[2]
    dxp = np.zeros((bsz, max(hp, s * ho + kh), max(wp, s * wo + kw), cin), g.dtype)
    _scatter_windows(dxp, gcols, kh, kw, s, ho, wo)
    dx = dxp[:, ph[0]:ph[0] + xshape[1], pw[0]:pw[0] + xshape[2], :]
    return np.ascontiguousarray(dx), grad_w, grad_b


def conv2d_naive(x, w, b, stride=1, padding="valid"):
    """Direct nested-loop convolution; slow, kept as the reference oracle."""
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = out_size(h, kh, stride, padding)
    wo = out_size(wd, kw, stride, padding)
    pt, _ = pad_amounts(h, kh, stride, padding)
    pl, _ = pad_amounts(wd, kw, stride, padding)
    y = np.zeros((bsz, ho, wo, cout), dtype=np.result_type(x, w))
    for n in range(bsz):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for i in range(kh):
                        iy = oy * stride + i - pt
                        if not 0 <= iy < h:
                            continue
                        for j in range(kw):
                            ix = ox * stride + j - pl
                            if not 0 <= ix < wd:
                                continue
                            for ci in range(cin):
                                acc += x[n, iy, ix, ci] * w[i, j, ci, co]
                    y[n, oy, ox, co] = acc + (b[co] if b is not None else 0.0)
    return y


# -- pooling ----------------------------------------------------------------

def pool2d_forward(x, attrs: PoolAttrs):
    bsz, h, wd, c = x.shape
    kh, kw, s = attrs.window_h, attrs.window_w, attrs.stride
    ho = out_size(h, kh, s, attrs.padding)
    wo = out_size(wd, kw, s, attrs.padding)
    fill = -np.inf if attrs.kind == "max" else 0.0
    xp, ph, pw = _pad(x, kh, kw, s, attrs.padding, fill)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError("pool window larger than padded input")
    win = _windows(xp, kh, kw, s).reshape(bsz, ho, wo, c, kh * kw)
    if attrs.kind == "max":
        arg = win.argmax(axis=-1)  # first occurrence: lowest flat index wins ties
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, xp.shape, ph, pw, arg, None)
    count = None
    if ph != (0, 0) or pw != (0, 0):
        ones, _, _ = _pad(np.ones((1, h, wd, 1), x.dtype), kh, kw, s, attrs.padding, 0.0)
        count = _windows(ones, kh, kw, s).reshape(1, ho, wo, 1, kh * kw).sum(axis=-1)
        y = win.sum(axis=-1) / count
    else:
        y = win.mean(axis=-1)
    return y, (x.shape, xp.shape, ph, pw, None, count)


def pool2d_backward(g, cache, attrs: PoolAttrs):
    xshape, xpshape, ph, pw, arg, count = cache
    kh, kw, s = attrs.window_h, attrs.window_w, attrs.stride
    bsz, ho, wo, c = g.shape
    dxp = np.zeros(xpshape, g.dtype)
    if attrs.kind == "max":
        for i in range(kh):
            for j in range(kw):
                part = np.where(arg == i * kw + j, g, 0.0)
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += part
    else:
        share = g / count if count is not None else g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += share
    return np.ascontiguousarray(dxp[:, ph[0]:ph[0] + xshape[1], pw[0]:pw[0] + xshape[2], :])


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2), keepdims=True), x.shape


def global_avg_pool_backward(g, xshape):
    _, h, w, _ = xshape
    return np.broadcast_to(g / (h * w), xshape).copy()


# -- batch normalisation ----------------------------------------------------

def batchnorm_forward(x, gamma, beta, state: dict, attrs: BatchNormAttrs, training: bool):
    """Per-channel normalisation. In training mode ``state`` moving stats are updated in place."""
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = attrs.momentum
        state["moving_mean"] = m * state["moving_mean"] + (1 - m) * mean
        state["moving_var"] = m * state["moving_var"] + (1 - m) * var
    else:
        mean = state["moving_mean"]
        var = state["moving_var"]
    denom = var + attrs.epsilon
    assert np.all(denom > 0)
    inv_std = 1.0 / np.sqrt(denom)
    xhat = (x - mean) * inv_std
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), (xhat, inv_std, gamma, training)


def batchnorm_backward(g, cache):
    """Return (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, training = cache
    axes = tuple(range(g.ndim - 1))
    grad_gamma = (g * xhat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    dxhat = g * gamma
    if training:
        n = g.size // g.shape[-1]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    else:
        dx = dxhat * inv_std
    return dx.astype(g.dtype, copy=False), grad_gamma, grad_beta


# -- pointwise / dense --------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(g, mask):
    return g * mask


def concat_forward(xs):
    return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]


def concat_backward(g, widths):
    bounds = np.cumsum(widths)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(g, bounds, axis=-1)]


def fc_forward(x, w, b):
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[0]:
        raise ValueError(f"fully connected expects {w.shape[0]} inputs, got {x2.shape[1]}")
    y = x2 @ w
    if b is not None:
        y += b
    return y, (x.shape, x2, w)


def fc_backward(g, cache, use_bias=True):
    xshape, x2, w = cache
    dx = (g @ w.T).reshape(xshape)
    return dx, x2.T @ g, (g.sum(axis=0) if use_bias else None)


def add_forward(xs, coeffs):
    out = coeffs[0] * xs[0]
    for c, x in zip(coeffs[1:], xs[1:]):
        out = out + c * x
    return out


def add_backward(g, coeffs):
    return [c * g for c in coeffs]


# -- loss -------------------------------------------------------------------

def check_target_rows(targets, tol=1e-6):
    if np.any(targets < 0):
        raise ValueError("target distribution has negative entries")
    sums = targets.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"target rows must sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent_forward(logits, targets, smoothing: float = 0.0):
    """Mean cross-entropy H(q, p) over the batch.

    With ``smoothing`` > 0 the targets are first mixed with the uniform
    distribution: q' = (1 - smoothing) q + smoothing / K.
    """
    check_target_rows(targets)
    if smoothing:
        targets = (1.0 - smoothing) * targets + smoothing / targets.shape[-1]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    loss = -(targets * logp).sum(axis=-1).mean()
    return np.asarray(loss, dtype=logits.dtype), probs, targets


def softmax_xent_backward(g, probs, targets):
    """Gradient wrt logits of the batch-mean loss: (p - q) / B, scaled by upstream ``g``."""
    return (probs - targets) * (np.asarray(g).reshape(()) / probs.shape[0])

