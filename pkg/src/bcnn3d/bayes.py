"""Variational 3D convolution with a mean-field Gaussian posterior over kernels.

The posterior for every kernel entry is ``N(mean, softplus(rho)**2)`` and the
prior is a fixed standard normal. Forward passes use Flipout: a single shared
Gaussian perturbation is decorrelated across the batch by random +-1 sign
vectors on the input and output channels of each example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    LayerGrads,
    conv3d_forward,
    conv3d_input_grad,
    conv3d_kernel_grad,
)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _logistic(x):
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class PosteriorParams:
    """Variational parameters of one Bayesian convolution.

    ``mean`` and ``rho`` share the kernel shape ``(kd, kh, kw, c_in, c_out)``;
    the bias is a deterministic point estimate and carries no KL.
    """

    mean: np.ndarray
    rho: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.rho.shape:
            raise ValueError(f"mean shape {self.mean.shape} != rho shape {self.rho.shape}")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @classmethod
    def init(cls, shape, rng, mean_std=0.05, sigma=0.1, dtype=np.float32):
        mean = rng.normal(0.0, mean_std, size=shape).astype(dtype)
        rho = np.full(shape, softplus_inv(sigma), dtype=dtype)
        return cls(mean=mean, rho=rho, bias=np.zeros(shape[-1], dtype=dtype))


@dataclass
class FlipoutNoise:
    """One call's worth of Flipout randomness.

    ``eps`` is the shared standard-normal kernel draw; ``sign_in`` and
    ``sign_out`` are per-example +-1 vectors shaped to broadcast against
    ``(batch, d, h, w, channels)`` tensors.
    """

    eps: np.ndarray
    sign_in: np.ndarray
    sign_out: np.ndarray


def _rademacher(rng, shape, dtype):
    return (2 * rng.integers(0, 2, size=shape) - 1).astype(dtype)


def sample_flipout(p: PosteriorParams, batch: int, rng: np.random.Generator) -> FlipoutNoise:
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    dtype = p.mean.dtype
    c_in, c_out = p.mean.shape[3], p.mean.shape[4]
    eps = rng.standard_normal(p.mean.shape).astype(dtype)
    return FlipoutNoise(
        eps=eps,
        sign_in=_rademacher(rng, (batch, 1, 1, 1, c_in), dtype),
        sign_out=_rademacher(rng, (batch, 1, 1, 1, c_out), dtype),
    )


def effective_weights(p: PosteriorParams, noise: FlipoutNoise) -> np.ndarray:
    """Per-example kernels implied by Flipout, shape ``(batch,) + kernel.shape``.

    Example ``n`` sees ``mean + sigma * eps * outer(sign_in[n], sign_out[n])``.
    Only used for inspection; the forward pass never materializes these.
    """
    s = noise.sign_in[:, 0, 0, 0, :]
    r = noise.sign_out[:, 0, 0, 0, :]
    flips = s[:, :, None] * r[:, None, :]
    return p.mean[None] + (p.sigma * noise.eps)[None] * flips[:, None, None, None, :, :]


def kl_to_standard_normal(p: PosteriorParams) -> float:
    """Closed-form KL(q || N(0, 1)) summed over every kernel entry."""
    mean = p.mean.astype(np.float64)
    sigma = softplus(p.rho.astype(np.float64))
    return float(0.5 * np.sum(mean**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))


def kl_grads(p: PosteriorParams) -> dict[str, np.ndarray]:
    """Gradients of :func:`kl_to_standard_normal` with respect to mean and rho."""
    sigma = p.sigma
    dsigma = sigma - 1.0 / sigma
    return {"mean": p.mean.copy(), "rho": (dsigma * _logistic(p.rho)).astype(p.rho.dtype)}


def flipout_forward(x: np.ndarray, p: PosteriorParams, noise: FlipoutNoise) -> np.ndarray:
    """Flipout convolution with frozen noise: a deterministic function of (x, p)."""
    out = conv3d_forward(x, p.mean, p.bias)
    delta = p.sigma * noise.eps
    out += conv3d_forward(x * noise.sign_in, delta) * noise.sign_out
    return out


def flipout_backward(x: np.ndarray, p: PosteriorParams, noise: FlipoutNoise, grad_out: np.ndarray) -> LayerGrads:
    """Data-term gradients of :func:`flipout_forward` (KL gradients are separate)."""
    ksize = p.mean.shape[:3]
    delta = p.sigma * noise.eps
    g_pert = grad_out * noise.sign_out
    dmean = conv3d_kernel_grad(x, grad_out, ksize)
    ddelta = conv3d_kernel_grad(x * noise.sign_in, g_pert, ksize)
    drho = ddelta * noise.eps * _logistic(p.rho)
    dx = conv3d_input_grad(grad_out, p.mean) + conv3d_input_grad(g_pert, delta) * noise.sign_in
    return LayerGrads(dx, {"mean": dmean, "rho": drho, "bias": grad_out.sum(axis=(0, 1, 2, 3))})


def bayes_conv3d(x: np.ndarray, p: PosteriorParams, rng: np.random.Generator):
    """Stochastic forward pass returning ``(output, kl)``.

    To differentiate a draw, sample it with :func:`sample_flipout` and use
    :func:`flipout_forward` / :func:`flipout_backward` directly.
    """
    noise = sample_flipout(p, x.shape[0], rng)
    return flipout_forward(x, p, noise), kl_to_standard_normal(p)
