"""From-scratch neural network primitives on numpy arrays.

Spatial activations are (batch, channels, height, width); dense activations
are (batch, features). Training math is expected to run in float64 so the
finite-difference checks stay meaningful; float32 is fine for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12  # clamp inside the cross-entropy log
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch


# --------------------------------------------------------------- init

def he_init(fan_in: int, shape, seed) -> np.ndarray:
    """Zero-mean Gaussian draw with variance 2/fan_in, deterministic by seed."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


# --------------------------------------------------------------- conv

def _check_conv_args(x, kernels, mode):
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-d, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ValueError(f"kernels must be (F, C, 3, 3), got {kernels.shape}")
    if kernels.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, kernels expect {kernels.shape[1]}")
    if mode not in ("valid", "same"):
        raise ValueError(f"mode must be 'valid' or 'same', got {mode!r}")
    if mode == "valid" and (x.shape[2] < 3 or x.shape[3] < 3):
        raise ValueError(f"valid mode needs height/width >= 3, got {x.shape[2:]}")


def _im2col3(x, mode):
    # unrolls every 3x3 window into one row; column order is channel-major
    # then kernel row then kernel column, matching kernels.reshape(F, -1)
    if mode == "same":
        x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    b, c, hp, wp = x.shape
    ho, wo = hp - 2, wp - 2
    win = sliding_window_view(x, (3, 3), axis=(2, 3))  # (b, c, ho, wo, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * 9), ho, wo


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
           mode: str = "valid") -> np.ndarray:
    """3x3 stride-1 cross-correlation; 'same' zero-pads one pixel per side."""
    _check_conv_args(x, kernels, mode)
    f = kernels.shape[0]
    if bias.shape != (f,):
        raise ValueError(f"bias must be ({f},), got {bias.shape}")
    b = x.shape[0]
    cols, ho, wo = _im2col3(x, mode)
    out = cols @ kernels.reshape(f, -1).T + bias
    return out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2)


def conv2d_grad(x: np.ndarray, kernels: np.ndarray, upstream: np.ndarray,
                mode: str = "valid"):
    """Gradients of conv2d: returns (d_input, d_kernels, d_bias)."""
    _check_conv_args(x, kernels, mode)
    b, c, h, w = x.shape
    f = kernels.shape[0]
    cols, ho, wo = _im2col3(x, mode)
    if upstream.shape != (b, f, ho, wo):
        raise ValueError(
            f"upstream must be {(b, f, ho, wo)}, got {upstream.shape}")
    gb = upstream.sum(axis=(0, 2, 3))
    gmat = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(-1, f)
    gk = (gmat.T @ cols).reshape(f, c, 3, 3)
    gcols = (gmat @ kernels.reshape(f, -1)).reshape(b, ho, wo, c, 3, 3)
    pad = 1 if mode == "same" else 0
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=upstream.dtype)
    for di in range(3):
        for dj in range(3):
            gxp[:, :, di:di + ho, dj:dj + wo] += \
                gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + w]
    return gx, gk, gb


# --------------------------------------------------------------- pooling

def maxpool2x2(x: np.ndarray, ceil_mode: bool = False):
    """2x2 stride-2 max pooling; returns (output, argmax map).

    An odd trailing row/column is dropped when ceil_mode is False and kept
    as its own boundary-clamped window when True, so the winner always lies
    on a real input pixel. The argmax map stores flat row*W + col indices.
    """
    if x.ndim != 4:
        raise ValueError(f"pool input must be 4-d, got shape {x.shape}")
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"pool input needs height/width >= 2, got {(h, w)}")
    if ceil_mode and (h % 2 or w % 2):
        xp = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)),
                    constant_values=-np.inf)
    elif not ceil_mode:
        xp = x[:, :, :h - h % 2, :w - w % 2]
    else:
        xp = x
    h2, w2 = xp.shape[2] // 2, xp.shape[3] // 2
    win = xp.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h2, w2, 4)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    rows = (am >> 1) + 2 * np.arange(h2).reshape(1, 1, h2, 1)
    cols = (am & 1) + 2 * np.arange(w2).reshape(1, 1, 1, w2)
    argmax_map = rows * w + cols  # flat index in the unpadded input
    return out, argmax_map


def maxpool2x2_backward(argmax_map: np.ndarray, input_shape,
                        upstream: np.ndarray) -> np.ndarray:
    """Routes each upstream gradient to its window's winning input pixel."""
    b, c, h, w = input_shape
    if upstream.shape != argmax_map.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != argmax shape {argmax_map.shape}")
    gx = np.zeros((b, c, h * w), dtype=upstream.dtype)
    # windows are disjoint, so indices are unique per (b, c) and a plain
    # scatter is an exact sum
    np.put_along_axis(gx, argmax_map.reshape(b, c, -1),
                      upstream.reshape(b, c, -1), axis=2)
    return gx.reshape(b, c, h, w)


# --------------------------------------------------------------- batch norm

def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ValueError(f"batch norm input must be 2-d or 4-d, got shape {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, phase,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalization (axis 1 of 4-d input, columns of 2-d input).

    Train phase normalizes by batch statistics and folds them into the
    running stats in place; infer phase reads the running stats untouched.
    Returns (out, cache); the cache feeds batchnorm_backward.
    """
    axes, bshape = _bn_axes(x)
    if phase == "train":
        if x.shape[0] < 2:
            raise ValueError("train-phase batch norm needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif phase == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    std = np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) / std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out, (phase, xhat, std, gamma)


def batchnorm_backward(cache, upstream):
    """Gradients through train-phase batch norm: (d_input, d_gamma, d_beta)."""
    phase, xhat, std, gamma = cache
    if phase != "train":
        raise ValueError("batchnorm_backward requires a train-phase cache")
    axes, bshape = _bn_axes(xhat)
    dgamma = (upstream * xhat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    dxhat = upstream * gamma.reshape(bshape)
    # reduced form for batch statistics (biased variance)
    dx = (dxhat
          - dxhat.mean(axis=axes, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx / std.reshape(bshape), dgamma, dbeta


# --------------------------------------------------------------- pointwise

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def dropout(x, keep_prob: float, phase: str, seed=None):
    """Inverted dropout. Returns (out, mask); infer phase is the identity.

    The mask already carries the 1/keep_prob rescale, so expected activation
    is unchanged and backward is a plain multiply.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if phase == "infer" or keep_prob == 1.0:
        return x, None
    if phase != "train":
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return x * mask, mask


def dropout_backward(mask, upstream):
    return upstream if mask is None else upstream * mask


# --------------------------------------------------------------- dense

def dense(x, weight, bias):
    """Affine map on (batch, features) input."""
    if x.ndim != 2:
        raise ValueError(f"dense input must be 2-d, got shape {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"width mismatch: input {x.shape[1]}, weight expects {weight.shape[0]}")
    return x @ weight + bias


def dense_grad(x, weight, upstream):
    """Gradients of dense: returns (d_input, d_weight, d_bias)."""
    return upstream @ weight.T, x.T @ upstream, upstream.sum(axis=0)


# --------------------------------------------------------------- loss

def softmax(scores):
    """Row-wise softmax with max subtraction for stability."""
    if scores.ndim != 2:
        raise ValueError(f"softmax input must be 2-d, got shape {scores.shape}")
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean categorical cross-entropy against one-hot labels.

    Returns (loss, grad) where grad is the combined softmax + cross-entropy
    gradient with respect to the pre-softmax scores: (probs - labels) / B.
    """
    if probs.shape != labels.shape:
        raise ValueError(
            f"shape mismatch: probs {probs.shape}, labels {labels.shape}")
    b = probs.shape[0]
    loss = -(labels * np.log(np.maximum(probs, LOG_FLOOR))).sum() / b
    return loss, (probs - labels) / b


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    """First/second moment accumulators for one parameter array."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float):
    """One Adam update with bias correction; returns (new_param, state)."""
    if param.shape != grad.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_step")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return param - lr * mhat / (np.sqrt(vhat) + state.eps), state


# --------------------------------------------------------------- oracle

def finite_diff_grad(fn, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by
    coordinate. fn is called with the same (temporarily perturbed) array and
    must not retain references to it."""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(point)
        flat[i] = orig - h
        fm = fn(point)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1e-12, max(|a|, |b|)) over the flattened pair."""
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)
