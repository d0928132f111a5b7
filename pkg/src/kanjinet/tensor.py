"""Forward and backward kernels for the layer kinds used by the CNN ensemble.

Tensors are plain numpy arrays in NCHW order. Every kernel is a pure
function; the backward of a layer takes the upstream gradient plus whatever
the forward consumed and returns a :class:`LayerGrads`. Kernels keep the
floating dtype of their inputs, so training runs in float32 while the
gradient oracle below can drive the same code in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

__all__ = [
    "LayerGrads",
    "conv2d",
    "conv2d_backward",
    "avgpool2d",
    "avgpool2d_backward",
    "dense",
    "dense_backward",
    "relu",
    "relu_backward",
    "dropout",
    "dropout_backward",
    "flatten",
    "flatten_backward",
    "softmax",
    "softmax_cross_entropy",
    "finite_difference_check",
]


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_params: dict[str, np.ndarray] = field(default_factory=dict)


def _float_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float32)


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_windows(xp, kh, kw, stride):
    # (N, C, OH, OW, KH, KW) view; tensordot materialises it as im2col
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _check_conv(x, kernel, bias, stride, padding):
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"input channel axis (1) has {x.shape[1]} but kernel in-channel axis (1) has {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match kernel out-channel axis (0) = {kernel.shape[0]}"
        )
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < kernel.shape[2]:
        raise DimensionError(f"padded height (axis 2) {hp} smaller than kernel height {kernel.shape[2]}")
    if wp < kernel.shape[3]:
        raise DimensionError(f"padded width (axis 3) {wp} smaller than kernel width {kernel.shape[3]}")


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlate ``x`` (N,C,H,W) with ``kernel`` (O,C,KH,KW) and add ``bias`` (O,)."""
    x, kernel, bias = np.asarray(x), np.asarray(kernel), np.asarray(bias)
    _check_conv(x, kernel, bias, stride, padding)
    dt = _float_dtype(x, kernel, bias)
    x = x.astype(dt, copy=False)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(x, kernel.shape[2], kernel.shape[3], stride)
    out = np.tensordot(win, kernel.astype(dt, copy=False), axes=([1, 4, 5], [1, 2, 3]))
    out += bias.astype(dt, copy=False)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, kernel, stride=1, padding=0, need_input=True, need_params=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias.

    ``need_input`` / ``need_params`` skip work whose result the caller
    discards; the skipped entries come back as None / are left out.
    """
    x, kernel, grad_out = np.asarray(x), np.asarray(kernel), np.asarray(grad_out)
    _check_conv(x, kernel, None, stride, padding)
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if grad_out.shape != (n, o, oh, ow):
        raise DimensionError(f"upstream gradient shape {grad_out.shape} != conv output {(n, o, oh, ow)}")
    dt = _float_dtype(x, kernel, grad_out)
    g = grad_out.astype(dt, copy=False)
    xp = x.astype(dt, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    d_params = {}
    if need_params:
        win = _conv_windows(xp, kh, kw, stride)
        d_params["kernel"] = np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        d_params["bias"] = g.sum(axis=(0, 2, 3))
    if not need_input:
        return LayerGrads(None, d_params)

    # input gradient: full correlation of the (dilated) upstream gradient with the flipped kernel
    if stride > 1:
        gd = np.zeros((n, o, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=dt)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    extra_h = hp - kh - (oh - 1) * stride
    extra_w = wp - kw - (ow - 1) * stride
    gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1 + extra_h), (kw - 1, kw - 1 + extra_w)))
    flipped = kernel.astype(dt, copy=False)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gwin = _conv_windows(gd, kh, kw, 1)
    dxp = np.tensordot(gwin, flipped, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    d_input = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])
    return LayerGrads(d_input, d_params)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _check_pool(x, window, stride):
    _check_rank(x, 4, "avgpool2d input")
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be positive, got {window}, {stride}")
    if x.shape[2] < window or x.shape[3] < window:
        raise DimensionError(f"pool window {window} larger than spatial extents (axes 2,3) {x.shape[2:]}")


def avgpool2d(x, window=2, stride=None):
    """Mean over ``window``x``window`` cells; trailing rows/cols that do not fill a window are dropped."""
    x = np.asarray(x)
    stride = window if stride is None else stride
    _check_pool(x, window, stride)
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.mean(axis=(4, 5), dtype=_float_dtype(x)).astype(_float_dtype(x), copy=False)


def avgpool2d_backward(grad_out, x, window=2, stride=None):
    x, grad_out = np.asarray(x), np.asarray(grad_out)
    stride = window if stride is None else stride
    _check_pool(x, window, stride)
    oh = (x.shape[2] - window) // stride + 1
    ow = (x.shape[3] - window) // stride + 1
    if grad_out.shape != x.shape[:2] + (oh, ow):
        raise DimensionError(f"upstream gradient shape {grad_out.shape} != pool output {x.shape[:2] + (oh, ow)}")
    dt = _float_dtype(x, grad_out)
    share = grad_out.astype(dt) / (window * window)
    d_input = np.zeros(x.shape, dtype=dt)
    for i in range(window):
        for j in range(window):
            d_input[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += share
    return LayerGrads(d_input)


# ---------------------------------------------------------------------------
# dense / activation / regularisation / reshape
# ---------------------------------------------------------------------------

def _check_dense(x, weights):
    _check_rank(x, 2, "dense input")
    _check_rank(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"input feature axis (1) has {x.shape[1]} but weight input axis (0) has {weights.shape[0]}"
        )


def dense(x, weights, bias):
    x, weights, bias = np.asarray(x), np.asarray(weights), np.asarray(bias)
    _check_dense(x, weights)
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match weight output axis (1) = {weights.shape[1]}")
    dt = _float_dtype(x, weights, bias)
    return x.astype(dt, copy=False) @ weights.astype(dt, copy=False) + bias.astype(dt, copy=False)


def dense_backward(grad_out, x, weights):
    x, weights, grad_out = np.asarray(x), np.asarray(weights), np.asarray(grad_out)
    _check_dense(x, weights)
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise DimensionError(f"upstream gradient shape {grad_out.shape} != dense output {(x.shape[0], weights.shape[1])}")
    dt = _float_dtype(x, weights, grad_out)
    g = grad_out.astype(dt, copy=False)
    return LayerGrads(
        g @ weights.astype(dt, copy=False).T,
        {"weights": x.astype(dt, copy=False).T @ g, "bias": g.sum(axis=0)},
    )


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(_float_dtype(x), copy=False)


def relu_backward(grad_out, x):
    # subgradient at exactly 0 is 0
    x, grad_out = np.asarray(x), np.asarray(grad_out)
    return LayerGrads(np.where(x > 0, grad_out, 0).astype(_float_dtype(x, grad_out), copy=False))


def dropout(x, p, train, rng=None):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None when nothing is dropped.

    In train phase each element is kept with probability ``1 - p`` and
    survivors are scaled by ``1 / (1 - p)``.
    """
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x)
    if not train or p == 0:
        return x, None
    if rng is None:
        raise ConfigError("train-phase dropout needs an explicit rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(_float_dtype(x)) / np.asarray(1 - p, dtype=_float_dtype(x))
    return x * mask, mask


def dropout_backward(grad_out, mask):
    grad_out = np.asarray(grad_out)
    if mask is None:
        return LayerGrads(grad_out)
    return LayerGrads(grad_out * mask)


def flatten(x):
    x = np.asarray(x)
    _check_rank(x, 4, "flatten input")
    return x.reshape(x.shape[0], -1)


def flatten_backward(grad_out, x_shape):
    return LayerGrads(np.asarray(grad_out).reshape(x_shape))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits):
    logits = np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Returns ``(loss, d_logits, probs)`` with ``d_logits = (probs - onehot) / N``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    _check_rank(logits, 2, "logits")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean()) if n else 0.0
    d_logits = probs.copy()
    d_logits[rows, labels] -= 1
    d_logits /= max(n, 1)
    return loss, d_logits, probs


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Mapping[str, np.ndarray]],
    inputs: Mapping[str, np.ndarray],
    epsilon: float = 1e-3,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central differences in float64.

    ``forward(**inputs)`` returns an array ``y``; the scalar probed is
    ``sum(y * r)`` for a fixed random ``r``. ``backward(r, **inputs)`` must
    return a mapping from (a subset of) input names to their analytic
    gradients. Returns the maximum over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    y = np.asarray(forward(**inputs), dtype=np.float64)
    r = np.random.default_rng(seed).standard_normal(y.shape)
    analytic = backward(r, **inputs)

    worst = 0.0
    for name, grad in analytic.items():
        grad = np.asarray(grad, dtype=np.float64)
        x = inputs[name]
        if grad.shape != x.shape:
            raise DimensionError(f"gradient for {name!r} has shape {grad.shape}, expected {x.shape}")
        numeric = np.empty_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(np.sum(np.asarray(forward(**inputs), dtype=np.float64) * r))
            flat[i] = orig - epsilon
            down = float(np.sum(np.asarray(forward(**inputs), dtype=np.float64) * r))
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(grad - numeric) / denom, initial=0.0)))
    return worst
