"""Differentiable tensor operations on (N, C, H, W) arrays.

Convolutions are computed as im2col + GEMM.  The batch is processed in
chunks so the unrolled column buffer never exceeds a fixed size, which keeps
peak memory flat regardless of batch size; chunk boundaries depend only on
the shapes involved, so results are bitwise reproducible.

The transposed convolution is the exact adjoint of ``conv2d`` (PyTorch
weight convention ``(C_in, C_out, kH, kW)``): its forward pass is the
input-gradient of the matching convolution and vice versa, so both share the
same two primitives below.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Cap on a single im2col buffer; chunking is a function of shape only.
_COL_BUDGET_BYTES = 128 << 20


def conv2d_output_shape(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # xp: padded input (m, c, hp, wp) -> (m*ho*wo, c*k*k), one copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    m, c, ho, wo = v.shape[:4]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(m * ho * wo, c * k * k)


def _chunk(n: int, per_sample_cols: int, itemsize: int) -> int:
    return max(1, min(n, _COL_BUDGET_BYTES // max(1, per_sample_cols * itemsize)))


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlate ``x`` (n, c_in, h, w) with ``w`` (c_out, c_in, k, k)."""
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ValueError(f"weight {w.shape} incompatible with input {x.shape}")
    ho = conv2d_output_shape(h, k, stride, padding)
    wo = conv2d_output_shape(wd, k, stride, padding)
    xp = _pad_hw(x, padding)
    wmat = w.reshape(co, ci * k * k)
    out = np.empty((n, co, ho, wo), dtype=x.dtype)
    step = _chunk(n, ho * wo * ci * k * k, x.dtype.itemsize)
    for i in range(0, n, step):
        cols = _im2col(xp[i : i + step], k, stride)
        om = cols @ wmat.T
        out[i : i + step] = om.reshape(-1, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def _col2im_add(dcols: np.ndarray, dxp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> None:
    # dcols: (m*ho*wo, c*k*k) scattered (+=) into the padded gradient dxp
    m, c = dxp.shape[:2]
    d = dcols.reshape(m, ho, wo, c, k, k)
    for a in range(k):
        for bb in range(k):
            dxp[:, :, a : a + stride * ho : stride, bb : bb + stride * wo : stride] += d[
                :, :, :, :, a, bb
            ].transpose(0, 3, 1, 2)


def _conv_dx_full(dy: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    # Adjoint of the GEMM above: dxp[n,c,i*s+a,j*s+b] += w[o,c,a,b] * dy[n,o,i,j]
    n, o, ho, wo = dy.shape
    o2, c, k, _ = w.shape
    if o2 != o:
        raise ValueError(f"weight {w.shape} incompatible with gradient {dy.shape}")
    wmat = w.reshape(o, c * k * k)
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    step = _chunk(n, ho * wo * c * k * k, dy.dtype.itemsize)
    for i in range(0, n, step):
        dym = dy[i : i + step].transpose(0, 2, 3, 1).reshape(-1, o)
        dcols = dym @ wmat
        _col2im_add(dcols, dxp[i : i + step], k, stride, ho, wo)
    return dxp


def _conv_dw(dy: np.ndarray, xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # dw[o,c,a,b] = sum_n,i,j dy[n,o,i,j] * xp[n,c,i*s+a,j*s+b]
    n, o, ho, wo = dy.shape
    c = xp.shape[1]
    dwmat = np.zeros((o, c * k * k), dtype=dy.dtype)
    step = _chunk(n, ho * wo * c * k * k, dy.dtype.itemsize)
    for i in range(0, n, step):
        cols = _im2col(xp[i : i + step], k, stride)
        dym = dy[i : i + step].transpose(0, 2, 3, 1).reshape(-1, o)
        dwmat += dym.T @ cols
    return dwmat.reshape(o, c, k, k)


def conv2d_backward(
    dout: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = _pad_hw(x, padding)
    db = dout.sum(axis=(0, 2, 3))
    dw = _conv_dw(dout, xp, k, stride)
    dxp = _conv_dx_full(dout, w, stride, xp.shape[2], xp.shape[3])
    if padding:
        dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + wd])
    else:
        dx = dxp
    return dx, dw, db


def tconv2d_output_shape(extent: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (extent - 1) * stride - 2 * padding + k + output_padding


def transposed_conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> np.ndarray:
    """Transposed convolution of ``x`` (n, c_in, h, w) with ``w`` (c_in, c_out, k, k)."""
    n, ci, h, wd = x.shape
    ci2, co, k, _ = w.shape
    if ci2 != ci:
        raise ValueError(f"weight {w.shape} incompatible with input {x.shape}")
    if output_padding >= stride and output_padding != 0:
        raise ValueError("output_padding must be smaller than stride")
    ho = tconv2d_output_shape(h, k, stride, padding, output_padding)
    wo = tconv2d_output_shape(wd, k, stride, padding, output_padding)
    hf = (h - 1) * stride + k
    wf = (wd - 1) * stride + k
    out_f = _conv_dx_full(x, w, stride, max(hf, padding + ho), max(wf, padding + wo))
    out = np.ascontiguousarray(out_f[:, :, padding : padding + ho, padding : padding + wo])
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def transposed_conv2d_backward(
    dout: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`transposed_conv2d` w.r.t. input, weight and bias."""
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    hf = (h - 1) * stride + k
    wf = (wd - 1) * stride + k
    ho, wo = dout.shape[2:]
    # Embed the output gradient back into full scatter coordinates; rows the
    # forward pass only zero-extended (output_padding beyond the buffer) get
    # no contribution.
    dout_f = np.zeros((n, co, hf, wf), dtype=dout.dtype)
    he = min(padding + ho, hf)
    we = min(padding + wo, wf)
    dout_f[:, :, padding:he, padding:we] = dout[:, :, : he - padding, : we - padding]
    db = dout.sum(axis=(0, 2, 3))
    # Forward was a conv input-gradient, so dx is the conv forward pass and
    # dw has the usual form with the two tensors swapping roles.
    dx = conv2d(dout_f, w, None, stride=stride, padding=0)
    dw = _conv_dw(x, dout_f, k, stride)
    return dx, dw, db


def batch_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization.

    In training mode the batch is normalized by its own biased statistics and
    the running estimates are updated in place (the running variance uses the
    unbiased estimator).  In eval mode the running statistics are used.
    Returns ``(out, cache)`` where the cache feeds :func:`batch_norm_backward`.
    """
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        bessel = m / (m - 1) if m > 1 else 1.0
        running_var += momentum * var * bessel
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    cache = (xhat, inv_std, gamma, training)
    return out, cache


def batch_norm_backward(dout: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`batch_norm` w.r.t. input, gamma and beta."""
    xhat, inv_std, gamma, training = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    g = (gamma * inv_std).reshape(1, -1, 1, 1)
    if not training:
        return dout * g, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    # Backprop through the batch statistics themselves.
    sum_d = dout.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    sum_dx = (dout * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    dx = g * (dout - sum_d / m - xhat * sum_dx / m)
    return dx, dgamma, dbeta


def leaky_relu(x: np.ndarray, negative_slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, x, x * np.asarray(negative_slope, dtype=x.dtype))


def leaky_relu_backward(dout: np.ndarray, x: np.ndarray, negative_slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, dout, dout * np.asarray(negative_slope, dtype=dout.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * y * (1.0 - y)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    diff = pred - target
    loss = float(np.mean(np.square(diff), dtype=np.float64))
    dpred = diff * np.asarray(2.0 / diff.size, dtype=pred.dtype)
    return loss, dpred


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step, in place on ``param``, ``m`` and ``v``.

    ``t`` is the 1-based step count after this update.
    """
    if t < 1:
        raise ValueError("step count t must be >= 1")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
