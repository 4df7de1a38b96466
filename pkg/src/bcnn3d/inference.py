"""Chunked Monte Carlo prediction, stitching, and percentile uncertainty maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chunking import ChunkSpec, chunk
from .errors import BadConfig, EmptySamples, IndivisibleSamples
from .model import ModelState, forward
from .volume import as_volume

DEFAULT_INTERVALS = ((33.0, 67.0), (20.0, 80.0), (5.0, 95.0))

PredictFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class InferenceConfig:
    mc_samples: int = 48
    batch_size: int = 8
    percentile_points: Sequence[float] = (33.0, 67.0)
    trim_fraction: float = 0.10
    step: int = 3
    chunk_size: tuple[int, int, int] | None = None
    stochastic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 1 or self.batch_size < 1:
            raise BadConfig("mc_samples and batch_size must be positive")
        if self.mc_samples % self.batch_size:
            raise IndivisibleSamples(
                f"mc_samples ({self.mc_samples}) must be divisible by batch_size ({self.batch_size})"
            )
        pts = [float(q) for q in self.percentile_points]
        if len(pts) < 2 or any(not 0.0 < q < 100.0 for q in pts) or any(a >= b for a, b in zip(pts, pts[1:])):
            raise BadConfig(f"percentile_points must be >= 2 strictly increasing values in (0, 100), got {pts}")
        self.percentile_points = tuple(pts)
        if not 0.0 <= self.trim_fraction < 0.5:
            raise BadConfig(f"trim_fraction must be in [0, 0.5), got {self.trim_fraction}")


@dataclass
class UncertaintyBundle:
    """Stitched prediction outputs.

    ``sigmoid`` is the mean probability map, ``percentiles`` holds one map
    per percentile point, ``pred`` thresholds ``sigmoid`` strictly above 0.5
    and ``unc`` is the last percentile map minus the first.
    """

    sigmoid: np.ndarray
    percentiles: list[np.ndarray]
    percentile_points: tuple[float, ...]
    pred: np.ndarray
    unc: np.ndarray
    fallback_voxels: int = 0
    meta: dict = field(default_factory=dict)


def percentile(samples, q, axis=0):
    """Linear-interpolation percentile (rank ``q/100 * (n-1)`` between order statistics)."""
    samples = np.asarray(samples)
    if samples.size == 0 or samples.shape[axis] == 0:
        raise EmptySamples("percentile of an empty sample set")
    return np.percentile(samples, q, axis=axis, method="linear")


def trim_chunk(chunk_samples, coord, chunk_shape, test_shape, trim_fraction: float = 0.10):
    """Drop chunk faces that do not lie on the volume boundary.

    ``chunk_samples`` has the sample axis first, then the three spatial axes.
    Returns ``(trimmed_samples, adjusted_coord, trimmed_shape)``.
    """
    coord = list(coord)
    trimmed = list(chunk_shape)
    out = chunk_samples
    for i in range(3):
        border = math.ceil(chunk_shape[i] * trim_fraction)
        if border == 0:
            continue
        at_start = coord[i] == 0
        at_end = coord[i] == test_shape[i] - chunk_shape[i]
        sl = [slice(None)] * out.ndim
        if not at_start and not at_end:
            sl[i + 1] = slice(border, -border)
            coord[i] += border
            trimmed[i] -= 2 * border
        elif not at_start:
            sl[i + 1] = slice(border, None)
            coord[i] += border
            trimmed[i] -= border
        elif not at_end:
            sl[i + 1] = slice(None, -border)
            trimmed[i] -= border
        out = out[tuple(sl)]
    return out, tuple(coord), tuple(trimmed)


def model_predict_fn(m: ModelState, stochastic: bool = True) -> PredictFn:
    def fn(batch, rng):
        return forward(m, batch, rng, stochastic=stochastic)[0]

    return fn


def _as_predict_fn(model, stochastic: bool) -> PredictFn:
    if isinstance(model, ModelState):
        return model_predict_fn(model, stochastic)
    if callable(model):
        return model
    raise TypeError(f"model must be a ModelState or a callable, got {type(model)!r}")


def _sample_chunk(fn: PredictFn, ch: np.ndarray, cfg: InferenceConfig, rng) -> np.ndarray:
    batch = np.repeat(ch[None], cfg.batch_size, axis=0)
    samples = np.empty((cfg.mc_samples,) + ch.shape[:3], dtype=np.float32)
    for j in range(0, cfg.mc_samples, cfg.batch_size):
        out = np.asarray(fn(batch, rng))
        samples[j : j + cfg.batch_size] = out.reshape((cfg.batch_size,) + ch.shape[:3])
    return samples


def predict(model, volume, cfg: InferenceConfig | None = None) -> UncertaintyBundle:
    """Monte Carlo prediction over overlapping chunks of ``volume``.

    ``model`` is a :class:`ModelState` or any ``fn(batch, rng) -> probs``.
    Each chunk is sampled ``cfg.mc_samples`` times; its mean and percentile
    maps are trimmed at interior faces and summed into volume accumulators
    with a per-voxel count. Voxels that trimming leaves uncovered (possible
    when chunks overlap by less than two borders) fall back to the untrimmed
    chunk contributions; ``fallback_voxels`` reports how many did.
    """
    cfg = cfg or InferenceConfig()
    fn = _as_predict_fn(model, cfg.stochastic)
    vol = as_volume(volume, dtype=np.float32)
    shape = vol.shape[:3]
    size = tuple(cfg.chunk_size) if cfg.chunk_size is not None else shape
    chunks = chunk(vol, ChunkSpec(size, cfg.step))
    rng = np.random.default_rng(cfg.seed)
    n_pts = len(cfg.percentile_points)

    # index 0 is the mean map, 1.. are the percentile maps
    sums = np.zeros((n_pts + 1,) + shape, dtype=np.float64)
    counts = np.zeros(shape, dtype=np.int64)
    full_sums = np.zeros_like(sums)
    full_counts = np.zeros_like(counts)

    for ch, coord in zip(chunks.chunks, chunks.coords):
        samples = _sample_chunk(fn, ch, cfg, rng)
        stats = np.concatenate(
            [samples.mean(axis=0)[None], percentile(samples, list(cfg.percentile_points), axis=0)]
        )
        region = tuple(slice(c, c + s) for c, s in zip(coord, size))
        full_sums[(slice(None),) + region] += stats
        full_counts[region] += 1

        t_stats, t_coord, t_shape = trim_chunk(stats, coord, size, shape, cfg.trim_fraction)
        region = tuple(slice(c, c + s) for c, s in zip(t_coord, t_shape))
        sums[(slice(None),) + region] += t_stats
        counts[region] += 1

    uncovered = counts == 0
    sums[:, uncovered] = full_sums[:, uncovered]
    counts[uncovered] = full_counts[uncovered]
    maps = (sums / counts).astype(np.float32)[..., None]

    sigmoid_map = maps[0]
    pcts = [maps[i + 1] for i in range(n_pts)]
    pred = (sigmoid_map[..., 0] > 0.5).astype(np.uint8)
    unc = pcts[-1] - pcts[0]
    return UncertaintyBundle(
        sigmoid=sigmoid_map,
        percentiles=pcts,
        percentile_points=tuple(cfg.percentile_points),
        pred=pred,
        unc=unc,
        fallback_voxels=int(uncovered.sum()),
        meta={"n_chunks": len(chunks), "chunk_size": size},
    )


def probe_intervals(model, volume, cfg: InferenceConfig | None = None, intervals=DEFAULT_INTERVALS):
    """Uncertainty maps for several percentile intervals from one set of MC draws."""
    cfg = cfg or InferenceConfig()
    points = sorted({float(q) for iv in intervals for q in iv})
    probe_cfg = InferenceConfig(**{**cfg.__dict__, "percentile_points": tuple(points)})
    bundle = predict(model, volume, probe_cfg)
    by_point = dict(zip(points, bundle.percentiles))
    return [by_point[hi] - by_point[lo] for lo, hi in intervals]
