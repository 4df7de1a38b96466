"""Variational training: annealed, mini-batch-scaled ELBO optimized with Adam."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BadConfig, EmptyDataset, ShapeMismatch
from .model import ModelState, backward

log = logging.getLogger(__name__)

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class AnnealSchedule:
    """Monotonic KL annealing: weight ``k0`` up to epoch ``s``, then ``+k1`` per epoch, capped at 1."""

    s: int = 1
    k0: float = 0.5
    k1: float = 0.5

    def __post_init__(self):
        if self.s < 0 or not (0.0 <= self.k0 <= 1.0) or not (0.0 <= self.k1 <= 1.0):
            raise BadConfig(f"invalid anneal schedule {self}")


GRAPHITE_SCHEDULE = AnnealSchedule(s=1, k0=0.5, k1=0.5)
LASER_WELD_SCHEDULE = AnnealSchedule(s=1, k0=0.0, k1=0.25)


def kl_weight(sched: AnnealSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch <= sched.s:
        return sched.k0
    return min(1.0, sched.k0 + sched.k1 * (epoch - sched.s))


def nll_binary(pred, target) -> float:
    """Summed binary cross-entropy of probabilities ``pred`` against 0/1 ``target``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        if pred.size == target.size and pred.squeeze().shape == target.squeeze().shape:
            pred, target = pred.squeeze(), target.squeeze()
        else:
            raise ShapeMismatch(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


def elbo_loss(nll: float, kl: float, k_e: float, m: int) -> float:
    """Per-mini-batch free energy: ``nll + (k_e / m) * kl``."""
    if kl < 0:
        raise ValueError("kl must be non-negative")
    return nll + (k_e / m) * kl


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: AnnealSchedule = field(default_factory=lambda: GRAPHITE_SCHEDULE)
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = AnnealSchedule(**self.schedule)
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise BadConfig(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    nll: float
    kl: float
    k_e: float
    loss: float
    seconds: float


@dataclass
class TrainReport:
    rows: list[BatchRecord] = field(default_factory=list)
    minibatches_per_epoch: int = 0

    def epoch_summary(self) -> list[dict]:
        out = []
        for e in sorted({r.epoch for r in self.rows}):
            rs = [r for r in self.rows if r.epoch == e]
            out.append(
                {
                    "epoch": e,
                    "nll": float(np.mean([r.nll for r in rs])),
                    "kl": rs[-1].kl,
                    "loss": float(np.mean([r.loss for r in rs])),
                    "k_e": rs[0].k_e,
                    "seconds": float(sum(r.seconds for r in rs)),
                }
            )
        return out


Dataset = Sequence[tuple[np.ndarray, np.ndarray]]


def _stack(dataset: Dataset, idx) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([np.asarray(dataset[i][0], dtype=np.float32).reshape(dataset[i][0].shape[:3] + (1,)) for i in idx])
    ys = np.stack([np.asarray(dataset[i][1]).reshape(dataset[i][1].shape[:3] + (1,)) for i in idx])
    return xs, ys.astype(np.float32)


def train(
    model: ModelState,
    dataset: Dataset,
    cfg: TrainConfig,
    on_epoch_end: Callable[[int, ModelState, TrainReport], None] | None = None,
) -> tuple[ModelState, TrainReport]:
    """Bayes-by-backprop training over ``dataset`` of ``(scan, label)`` pairs.

    ``model`` is updated in place and returned. Each epoch shuffles the data,
    and each mini-batch takes one stochastic forward pass; the KL weight is
    held fixed within an epoch. ``on_epoch_end`` receives the 1-based epoch
    number, e.g. to write checkpoints.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("training dataset is empty")
    m_batches = math.ceil(n / cfg.batch_size)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])
    state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    report = TrainReport(minibatches_per_epoch=m_batches)

    for epoch in range(1, cfg.epochs + 1):
        k_e = kl_weight(cfg.schedule, epoch)
        order = order_rng.permutation(n)
        for b in range(m_batches):
            t0 = time.perf_counter()
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, y = _stack(dataset, idx)
            grads, terms, _ = backward(model, x, y, k_e / m_batches, noise_rng)
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state)
            row = BatchRecord(
                epoch=epoch,
                batch=b,
                nll=terms.nll,
                kl=terms.kl,
                k_e=k_e,
                loss=elbo_loss(terms.nll, terms.kl, k_e, m_batches),
                seconds=time.perf_counter() - t0,
            )
            report.rows.append(row)
            log.debug("epoch %d batch %d nll %.4g kl %.4g loss %.4g", epoch, b, row.nll, row.kl, row.loss)
        summary = report.epoch_summary()[-1]
        log.info("epoch %d: nll %.4g kl %.4g k_E %.3g (%.1fs)", epoch, summary["nll"], summary["kl"], k_e, summary["seconds"])
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, report)
    return model, report
