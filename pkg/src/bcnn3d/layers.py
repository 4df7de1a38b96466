"""Differentiable 3D layers with explicit forward and backward passes.

Tensors are ``(batch, depth, height, width, channels)`` arrays. Every
backward function returns the gradient of ``sum(upstream * forward(...))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadRate, IndivisibleChannels, OddSpatialDim, ShapeMismatch


@dataclass
class LayerGrads:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _pad_same(x: np.ndarray, k: tuple[int, int, int]) -> np.ndarray:
    pads = [(0, 0)] + [(ki // 2, ki // 2) for ki in k] + [(0, 0)]
    return np.pad(x, pads)


def _check_conv(x: np.ndarray, kernel: np.ndarray) -> None:
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeMismatch(f"expected 5-axis input and kernel, got {x.shape} and {kernel.shape}")
    if any(k % 2 == 0 for k in kernel.shape[:3]):
        raise ShapeMismatch(f"kernel spatial dims must be odd, got {kernel.shape[:3]}")
    if x.shape[-1] != kernel.shape[3]:
        raise ShapeMismatch(f"input has {x.shape[-1]} channels, kernel expects {kernel.shape[3]}")


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 convolution with zero "same" padding.

    ``kernel`` has shape ``(kd, kh, kw, c_in, c_out)`` with odd spatial sizes.
    """
    _check_conv(x, kernel)
    n, d, h, w, c_in = x.shape
    kd, kh, kw, _, c_out = kernel.shape
    dtype = np.result_type(x.dtype, kernel.dtype)
    xp = _pad_same(x, (kd, kh, kw))
    out = np.zeros((n, d, h, w, c_out), dtype=dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                window = xp[:, a : a + d, b : b + h, c : c + w, :]
                if c_in == 1:
                    out += window * kernel[a, b, c, 0]
                else:
                    out += window @ kernel[a, b, c]
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({c_out},)")
        out += bias
    return out


def conv3d_kernel_grad(x: np.ndarray, grad_out: np.ndarray, ksize: tuple[int, int, int]) -> np.ndarray:
    n, d, h, w, c_in = x.shape
    c_out = grad_out.shape[-1]
    kd, kh, kw = ksize
    xp = _pad_same(x, ksize)
    g2 = grad_out.reshape(-1, c_out)
    gk = np.empty((kd, kh, kw, c_in, c_out), dtype=np.result_type(x.dtype, grad_out.dtype))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                window = np.ascontiguousarray(xp[:, a : a + d, b : b + h, c : c + w, :])
                gk[a, b, c] = window.reshape(-1, c_in).T @ g2
    return gk


def conv3d_input_grad(grad_out: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Transpose of a same-padded stride-1 convolution is a convolution with the
    # spatially flipped, channel-transposed kernel.
    flipped = kernel[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
    return conv3d_forward(grad_out, np.ascontiguousarray(flipped))


def conv3d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray) -> LayerGrads:
    _check_conv(x, kernel)
    expected = x.shape[:4] + (kernel.shape[-1],)
    if grad_out.shape != expected:
        raise ShapeMismatch(f"upstream gradient shape {grad_out.shape} != {expected}")
    return LayerGrads(
        input_grad=conv3d_input_grad(grad_out, kernel),
        param_grads={
            "kernel": conv3d_kernel_grad(x, grad_out, kernel.shape[:3]),
            "bias": grad_out.sum(axis=(0, 1, 2, 3)),
        },
    )


def group_norm_forward(x, gamma, beta, groups: int = 4, eps: float = 1e-5):
    """Normalize each (example, channel group) over space and the group's channels.

    Returns ``(y, cache)``; pass ``cache`` to :func:`group_norm_backward`.
    """
    n, d, h, w, c = x.shape
    if c % groups:
        raise IndivisibleChannels(f"{c} channels not divisible into {groups} groups")
    xg = x.reshape(n, d * h * w, groups, c // groups)
    mean = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(x.shape)
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma, groups)


def group_norm_backward(grad_out, cache) -> LayerGrads:
    xhat, inv_std, gamma, groups = cache
    n, d, h, w, c = xhat.shape
    dgamma = (grad_out * xhat).sum(axis=(0, 1, 2, 3))
    dbeta = grad_out.sum(axis=(0, 1, 2, 3))
    dxhat = (grad_out * gamma).reshape(n, d * h * w, groups, c // groups)
    xg = xhat.reshape(dxhat.shape)
    m1 = dxhat.mean(axis=(1, 3), keepdims=True)
    m2 = (dxhat * xg).mean(axis=(1, 3), keepdims=True)
    dx = inv_std * (dxhat - m1 - xg * m2)
    return LayerGrads(dx.reshape(xhat.shape), {"gamma": dgamma, "beta": dbeta})


def _windows(x: np.ndarray) -> np.ndarray:
    n, d, h, w, c = x.shape
    v = x.reshape(n, d // 2, 2, h // 2, 2, w // 2, 2, c)
    return v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, d // 2, h // 2, w // 2, c, 8)


def max_pool_forward(x: np.ndarray):
    """2x2x2 max pooling. Returns ``(pooled, argmax)``.

    Ties resolve to the first element of the window in (z, y, x) scan order.
    """
    if any(s % 2 for s in x.shape[1:4]):
        raise OddSpatialDim(f"spatial dims must be even for 2x2x2 pooling, got {x.shape[1:4]}")
    win = _windows(x)
    idx = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def max_pool_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, d, h, w, c = grad_out.shape
    win = np.zeros((n, d, h, w, c, 8), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, d, h, w, c, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return win.reshape(n, 2 * d, 2 * h, 2 * w, c)


def upsample_nn(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour upsampling by 2 along each spatial axis."""
    n, d, h, w, c = x.shape
    big = np.broadcast_to(x[:, :, None, :, None, :, None, :], (n, d, 2, h, 2, w, 2, c))
    return big.reshape(n, 2 * d, 2 * h, 2 * w, c)


def upsample_nn_backward(grad_out: np.ndarray) -> np.ndarray:
    n, d, h, w, c = grad_out.shape
    g = grad_out.reshape(n, d // 2, 2, h // 2, 2, w // 2, 2, c)
    return g.sum(axis=(2, 4, 6))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=-1)


def concat_backward(grad_out: np.ndarray, a_channels: int) -> tuple[np.ndarray, np.ndarray]:
    return grad_out[..., :a_channels], grad_out[..., a_channels:]


def sigmoid(x):
    x = np.asarray(x)
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad_out):
    return grad_out * y * (1.0 - y)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def spatial_dropout(x: np.ndarray, rate: float, rng: np.random.Generator):
    """Zero whole channels per example with probability ``rate``.

    Survivors are scaled by ``1 / (1 - rate)``. Returns ``(y, mask)`` where
    ``mask`` (already scaled) has shape ``(batch, 1, 1, 1, channels)``.
    """
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    n, c = x.shape[0], x.shape[-1]
    if rate == 0.0:
        mask = np.ones((n, 1, 1, 1, c), dtype=x.dtype)
        return x, mask
    keep = rng.random((n, 1, 1, 1, c)) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask
