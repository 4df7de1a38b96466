"""Encoder-decoder segmentation network with Bayesian decoder convolutions.

The encoder has four stages of ``conv -> norm -> relu`` twice, with 2x2x2 max
pooling between stages; stage ``i`` (1-based) has ``2**(base + i)`` filters.
The last encoder stage is the bridge. Each of the three decoder stages
upsamples, convolves to halve the channels, concatenates the pre-pooling
output of the matching encoder stage, then applies two more conv/norm/relu
blocks. A 1x1x1 convolution and a sigmoid produce the probability map.

In ``bcnn`` mode every decoder convolution (and the head) is a Flipout
layer. In ``mcdn`` mode they are ordinary convolutions and spatial dropout
is applied at the end of every stage.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .bayes import (
    PosteriorParams,
    flipout_backward,
    flipout_forward,
    kl_grads,
    kl_to_standard_normal,
    sample_flipout,
    softplus_inv,
)
from .errors import BadConfig, BadShape, ShapeMismatch

MODES = ("bcnn", "mcdn")


@dataclass(frozen=True)
class ArchConfig:
    base_filter_exponent: int = 3
    stages_down: int = 4
    stages_up: int = 3
    groups: int = 4
    mode: str = "bcnn"
    dropout_rate: float = 0.2
    kernel_size: int = 3
    norm_eps: float = 1e-5
    posterior_mean_std: float = 0.05
    posterior_sigma: float = 0.1

    def __post_init__(self):
        if self.stages_down != 4 or self.stages_up != 3:
            raise BadConfig("the architecture is fixed at 4 encoder and 3 decoder stages")
        if self.mode not in MODES:
            raise BadConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.base_filter_exponent < 0:
            raise BadConfig("base_filter_exponent must be >= 0")
        if self.groups < 1 or 2 ** (self.base_filter_exponent + 1) % self.groups:
            raise BadConfig(f"{self.groups} groups do not divide the first stage's filters")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise BadConfig(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise BadConfig(f"kernel_size must be a positive odd int, got {self.kernel_size}")
        if self.posterior_sigma <= 0:
            raise BadConfig("posterior_sigma must be positive")

    @property
    def filters(self) -> list[int]:
        return [2 ** (self.base_filter_exponent + i) for i in range(1, self.stages_down + 1)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages_down - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    ksize: int
    bayesian: bool


def layer_plan(cfg: ArchConfig) -> tuple[list[ConvSpec], list[tuple[str, int]]]:
    """Convolutions and group norms of the network, in forward order."""
    bayes = cfg.mode == "bcnn"
    k = cfg.kernel_size
    f = cfg.filters
    convs, norms = [], []
    c = 1
    for i, fi in enumerate(f, start=1):
        convs += [ConvSpec(f"enc{i}.conv1", c, fi, k, False), ConvSpec(f"enc{i}.conv2", fi, fi, k, False)]
        norms += [(f"enc{i}.norm1", fi), (f"enc{i}.norm2", fi)]
        c = fi
    for j in range(1, cfg.stages_up + 1):
        fj = f[cfg.stages_up - j]
        convs += [
            ConvSpec(f"dec{j}.up_conv", c, fj, k, bayes),
            ConvSpec(f"dec{j}.conv1", 2 * fj, fj, k, bayes),
            ConvSpec(f"dec{j}.conv2", fj, fj, k, bayes),
        ]
        norms += [(f"dec{j}.up_norm", fj), (f"dec{j}.norm1", fj), (f"dec{j}.norm2", fj)]
        c = fj
    convs.append(ConvSpec("head", c, 1, 1, bayes))
    return convs, norms


class ModelState:
    """Configuration plus an ordered mapping of parameter name to array."""

    def __init__(self, cfg: ArchConfig, params: "OrderedDict[str, np.ndarray]"):
        self.cfg = cfg
        self.params = params
        self.convs = {spec.name: spec for spec in layer_plan(cfg)[0]}

    def posterior(self, name: str) -> PosteriorParams:
        p = self.params
        return PosteriorParams(p[f"{name}.mean"], p[f"{name}.rho"], p[f"{name}.bias"])

    def bayesian_layers(self) -> list[str]:
        return [n for n, s in self.convs.items() if s.bayesian]

    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def kl(self) -> float:
        return float(sum(kl_to_standard_normal(self.posterior(n)) for n in self.bayesian_layers()))

    def copy(self) -> "ModelState":
        return ModelState(self.cfg, OrderedDict((k, v.copy()) for k, v in self.params.items()))

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.cfg, OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def build(cfg: ArchConfig, rng: np.random.Generator, dtype=np.float32) -> ModelState:
    """Initialize parameters for ``cfg``.

    Deterministic kernels use He-normal init; posterior means are drawn from
    ``N(0, posterior_mean_std**2)`` and every posterior stddev starts at
    ``posterior_sigma``.
    """
    convs, norms = layer_plan(cfg)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    norm_iter = iter(norms)
    for spec in convs:
        shape = (spec.ksize,) * 3 + (spec.c_in, spec.c_out)
        if spec.bayesian:
            params[f"{spec.name}.mean"] = rng.normal(0.0, cfg.posterior_mean_std, size=shape).astype(dtype)
            params[f"{spec.name}.rho"] = np.full(shape, softplus_inv(cfg.posterior_sigma), dtype=dtype)
        else:
            fan_in = spec.ksize**3 * spec.c_in
            params[f"{spec.name}.kernel"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[f"{spec.name}.bias"] = np.zeros(spec.c_out, dtype=dtype)
        if spec.name != "head":
            norm_name, c = next(norm_iter)
            params[f"{norm_name}.gamma"] = np.ones(c, dtype=dtype)
            params[f"{norm_name}.beta"] = np.zeros(c, dtype=dtype)
    return ModelState(cfg, params)


def param_counts(cfg: ArchConfig) -> int:
    """Trainable parameter count, computed without allocating weights."""
    convs, norms = layer_plan(cfg)
    total = 2 * sum(c for _, c in norms)
    for s in convs:
        k = s.ksize**3 * s.c_in * s.c_out
        total += (2 * k if s.bayesian else k) + s.c_out
    return total


class _Tape:
    """Forward-pass record consumed in reverse by the backward pass."""

    def __init__(self, rng, stochastic, record):
        self.rng = rng
        self.stochastic = stochastic
        self.record = record
        self.ops: list[tuple] = []
        self.stage_shapes: list[tuple[int, ...]] = []

    def push(self, *op):
        if self.record:
            self.ops.append(op)


def _conv(m: ModelState, tape: _Tape, name: str, h: np.ndarray, noise_map=None) -> np.ndarray:
    spec = m.convs[name]
    if spec.bayesian:
        p = m.posterior(name)
        if tape.stochastic:
            noise = noise_map.get(name) if noise_map else None
            if noise is None:
                noise = sample_flipout(p, h.shape[0], tape.rng)
            tape.push("bconv", name, h, noise)
            return flipout_forward(h, p, noise)
        tape.push("mconv", name, h)
        return L.conv3d_forward(h, p.mean, p.bias)
    tape.push("conv", name, h)
    return L.conv3d_forward(h, m.params[f"{name}.kernel"], m.params[f"{name}.bias"])


def _norm_relu(m: ModelState, tape: _Tape, name: str, h: np.ndarray) -> np.ndarray:
    y, cache = L.group_norm_forward(
        h, m.params[f"{name}.gamma"], m.params[f"{name}.beta"], m.cfg.groups, m.cfg.norm_eps
    )
    tape.push("norm", name, cache)
    tape.push("relu", y)
    return L.relu(y)


def _dropout(m: ModelState, tape: _Tape, h: np.ndarray, drop_masks=None) -> np.ndarray:
    if m.cfg.mode != "mcdn" or not tape.stochastic or m.cfg.dropout_rate == 0.0:
        return h
    if drop_masks is not None and drop_masks:
        mask = drop_masks.pop(0)
        out = h * mask
    else:
        out, mask = L.spatial_dropout(h, m.cfg.dropout_rate, tape.rng)
    tape.push("drop", mask)
    return out


def _check_input(m: ModelState, x: np.ndarray) -> None:
    if x.ndim != 5 or x.shape[-1] != 1:
        raise BadShape(f"input must be (batch, d, h, w, 1), got {x.shape}")
    div = m.cfg.divisor
    if any(s % div for s in x.shape[1:4]):
        raise BadShape(f"spatial dims {x.shape[1:4]} must be divisible by {div}")


def _run(m: ModelState, x: np.ndarray, tape: _Tape, noise_map=None, drop_masks=None):
    """Forward pass to the pre-sigmoid logits."""
    _check_input(m, x)
    cfg = m.cfg
    h = x.astype(m.dtype, copy=False)
    skips = []
    for i in range(1, cfg.stages_down + 1):
        h = _norm_relu(m, tape, f"enc{i}.norm1", _conv(m, tape, f"enc{i}.conv1", h, noise_map))
        h = _norm_relu(m, tape, f"enc{i}.norm2", _conv(m, tape, f"enc{i}.conv2", h, noise_map))
        h = _dropout(m, tape, h, drop_masks)
        tape.stage_shapes.append(h.shape)
        if i < cfg.stages_down:
            skips.append(h)
            tape.push("skip", i)
            h, argmax = L.max_pool_forward(h)
            tape.push("pool", argmax)
    for j in range(1, cfg.stages_up + 1):
        h = L.upsample_nn(h)
        tape.push("up")
        h = _norm_relu(m, tape, f"dec{j}.up_norm", _conv(m, tape, f"dec{j}.up_conv", h, noise_map))
        skip_idx = cfg.stages_up + 1 - j
        h = L.concat_channels(h, skips[skip_idx - 1])
        tape.push("concat", h.shape[-1] - skips[skip_idx - 1].shape[-1], skip_idx)
        h = _norm_relu(m, tape, f"dec{j}.norm1", _conv(m, tape, f"dec{j}.conv1", h, noise_map))
        h = _norm_relu(m, tape, f"dec{j}.norm2", _conv(m, tape, f"dec{j}.conv2", h, noise_map))
        h = _dropout(m, tape, h, drop_masks)
        tape.stage_shapes.append(h.shape)
    return _conv(m, tape, "head", h, noise_map)


def forward(m: ModelState, x: np.ndarray, rng: np.random.Generator | None = None, stochastic: bool = True):
    """Probability map and total KL for a batch ``x`` of shape (n, d, h, w, 1).

    With ``stochastic=False`` dropout is off and Bayesian layers use their
    posterior means.
    """
    if stochastic and rng is None:
        raise ValueError("a stochastic forward pass needs an rng")
    tape = _Tape(rng, stochastic, record=False)
    logits = _run(m, x, tape)
    kl = m.kl() if m.cfg.mode == "bcnn" else 0.0
    return L.sigmoid(logits), kl


def stage_shapes(m: ModelState, x: np.ndarray) -> list[tuple[int, ...]]:
    """Output shape of every encoder and decoder stage for input ``x``."""
    tape = _Tape(None, False, record=False)
    _run(m, x, tape)
    return tape.stage_shapes


def nll_from_logits(logits: np.ndarray, target: np.ndarray) -> float:
    """Summed binary cross-entropy, evaluated stably from pre-sigmoid values."""
    z = logits.astype(np.float64)
    return float(np.sum(np.logaddexp(0.0, z) - target * z))


@dataclass
class LossTerms:
    nll: float
    kl: float
    loss: float


def backward(
    m: ModelState,
    x: np.ndarray,
    target: np.ndarray,
    kl_scale: float,
    rng: np.random.Generator | None = None,
    noise: dict | None = None,
):
    """Gradients of ``nll + kl_scale * kl`` for one batch.

    ``kl_scale`` is the annealed KL weight divided by the number of
    mini-batches per epoch. Stochastic draws come from ``rng``, or are frozen
    by passing ``noise`` (as returned in a previous call's ``.noise``) so that
    the loss is a deterministic function of the parameters.

    Returns ``(grads, terms, noise)``.
    """
    target = np.asarray(target)
    if target.shape[:4] != x.shape[:4]:
        raise ShapeMismatch(f"target shape {target.shape} does not match input {x.shape}")
    target = target.reshape(x.shape[:4] + (1,)).astype(m.dtype)
    noise_map = dict(noise["flipout"]) if noise else None
    drop_masks = list(noise["dropout"]) if noise else None
    tape = _Tape(rng, stochastic=True, record=True)
    logits = _run(m, x, tape, noise_map, drop_masks)

    nll = nll_from_logits(logits, target)
    kl = m.kl() if m.cfg.mode == "bcnn" else 0.0
    terms = LossTerms(nll=nll, kl=kl, loss=nll + kl_scale * kl)

    grads = {k: np.zeros_like(v) for k, v in m.params.items()}
    g = L.sigmoid(logits) - target
    skip_grads = {}
    frozen = {"flipout": {}, "dropout": []}
    for op in reversed(tape.ops):
        kind = op[0]
        if kind == "conv":
            _, name, h = op
            lg = L.conv3d_backward(h, m.params[f"{name}.kernel"], g)
            grads[f"{name}.kernel"] += lg.param_grads["kernel"]
            grads[f"{name}.bias"] += lg.param_grads["bias"]
            g = lg.input_grad
        elif kind == "bconv":
            _, name, h, nz = op
            lg = flipout_backward(h, m.posterior(name), nz, g)
            for key in ("mean", "rho", "bias"):
                grads[f"{name}.{key}"] += lg.param_grads[key]
            frozen["flipout"][name] = nz
            g = lg.input_grad
        elif kind == "norm":
            _, name, cache = op
            lg = L.group_norm_backward(g, cache)
            grads[f"{name}.gamma"] += lg.param_grads["gamma"]
            grads[f"{name}.beta"] += lg.param_grads["beta"]
            g = lg.input_grad
        elif kind == "relu":
            g = L.relu_backward(op[1], g)
        elif kind == "drop":
            frozen["dropout"].insert(0, op[1])
            g = g * op[1]
        elif kind == "pool":
            g = L.max_pool_backward(g, op[1])
        elif kind == "up":
            g = L.upsample_nn_backward(g)
        elif kind == "concat":
            _, a_channels, idx = op
            g, skip_grads[idx] = L.concat_backward(g, a_channels)
        elif kind == "skip":
            g = g + skip_grads.pop(op[1])
        else:  # pragma: no cover
            raise RuntimeError(f"unknown tape op {kind}")

    if m.cfg.mode == "bcnn" and kl_scale != 0.0:
        for name in m.bayesian_layers():
            kg = kl_grads(m.posterior(name))
            grads[f"{name}.mean"] += kl_scale * kg["mean"]
            grads[f"{name}.rho"] += kl_scale * kg["rho"]
    return grads, terms, frozen


def loss_with_noise(m: ModelState, x, target, kl_scale: float, noise: dict) -> float:
    """Loss of :func:`backward` re-evaluated under frozen noise (for gradient checks)."""
    target = np.asarray(target).reshape(x.shape[:4] + (1,))
    tape = _Tape(None, stochastic=True, record=False)
    logits = _run(m, x, tape, dict(noise["flipout"]), list(noise["dropout"]))
    kl = m.kl() if m.cfg.mode == "bcnn" else 0.0
    return nll_from_logits(logits, target) + kl_scale * kl
