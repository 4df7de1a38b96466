"""Patch-based uncertainty quality metrics for 3D segmentations.

A cubic patch slides over the volume; each patch is *accurate* when its mean
voxel accuracy reaches ``accuracy_threshold`` and *uncertain* when its mean
uncertainty exceeds ``uncertainty_threshold``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, VolumeSmallerThanPatch
from .volume import voxel_accuracy


@dataclass(frozen=True)
class PatchConfig:
    patch: tuple[int, int, int] = (2, 2, 2)
    accuracy_threshold: float = 7 / 8
    uncertainty_threshold: float | None = None  # None: mean of the uncertainty map
    stride: int = 1


@dataclass
class PatchGrid:
    accurate: np.ndarray
    uncertain: np.ndarray
    uncertainty_threshold: float

    @property
    def counts(self) -> dict[str, int]:
        a, u = self.accurate, self.uncertain
        return {
            "n": int(a.size),
            "n_ac": int(np.sum(a & ~u)),
            "n_au": int(np.sum(a & u)),
            "n_ic": int(np.sum(~a & ~u)),
            "n_iu": int(np.sum(~a & u)),
        }


def _squeeze(v) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim == 4 and v.shape[-1] == 1:
        v = v[..., 0]
    return v


def _patch_means(v: np.ndarray, patch, stride: int) -> np.ndarray:
    win = sliding_window_view(v, patch)[::stride, ::stride, ::stride]
    return win.mean(axis=(-3, -2, -1))


def patch_labels(pred, target, unc, cfg: PatchConfig = PatchConfig()) -> PatchGrid:
    pred, target, unc = _squeeze(pred), _squeeze(target), _squeeze(unc)
    if not (pred.shape == target.shape == unc.shape):
        raise ShapeMismatch(f"shapes differ: pred {pred.shape}, target {target.shape}, unc {unc.shape}")
    if pred.ndim != 3:
        raise ShapeMismatch(f"expected 3D volumes, got shape {pred.shape}")
    if any(s < p for s, p in zip(pred.shape, cfg.patch)):
        raise VolumeSmallerThanPatch(f"volume {pred.shape} smaller than patch {cfg.patch}")
    unc = unc.astype(np.float64)
    thr = float(unc.mean()) if cfg.uncertainty_threshold is None else float(cfg.uncertainty_threshold)
    correct = (pred == target).astype(np.float64)
    accurate = _patch_means(correct, cfg.patch, cfg.stride) >= cfg.accuracy_threshold
    uncertain = _patch_means(unc, cfg.patch, cfg.stride) > thr
    return PatchGrid(accurate=accurate, uncertain=uncertain, uncertainty_threshold=thr)


def conditional_probs(grid: PatchGrid) -> tuple[float | None, float | None]:
    """``(P(accurate | certain), P(uncertain | inaccurate))``; ``None`` where undefined."""
    c = grid.counts
    if c["n"] == 0:
        raise ValueError("empty patch grid")
    certain = c["n_ac"] + c["n_ic"]
    inaccurate = c["n_ic"] + c["n_iu"]
    p_ac = c["n_ac"] / certain if certain else None
    p_ui = c["n_iu"] / inaccurate if inaccurate else None
    return p_ac, p_ui


def pavpu_from_counts(c: dict[str, int]) -> float:
    return (c["n_ac"] + c["n_iu"]) / c["n"]


def pavpu3d(pred, target, unc, cfg: PatchConfig = PatchConfig()) -> float:
    return pavpu_from_counts(patch_labels(pred, target, unc, cfg).counts)


def uq_mean(unc) -> float:
    unc = np.asarray(unc, dtype=np.float64)
    if np.any(unc < 0):
        raise ValueError("uncertainty map has negative entries")
    return float(unc.mean())


@dataclass
class MetricsReport:
    sample: str
    method: str
    accuracy: float
    uq_mean: float
    p_accurate_given_certain: float | None
    p_uncertain_given_inaccurate: float | None
    pavpu3d: float
    uncertainty_threshold: float
    n: int
    n_ac: int
    n_au: int
    n_ic: int
    n_iu: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    def csv_row(self) -> dict:
        def fmt(v):
            return "" if v is None else f"{v:.4f}"

        return {
            "Sample": self.sample,
            "Method": self.method,
            "Accuracy": fmt(self.accuracy),
            "UQ Mean": f"{self.uq_mean:.4e}",
            "P(A|C)": fmt(self.p_accurate_given_certain),
            "P(U|I)": fmt(self.p_uncertain_given_inaccurate),
            "PAvPU3D": fmt(self.pavpu3d),
        }


CSV_COLUMNS = ["Sample", "Method", "Accuracy", "UQ Mean", "P(A|C)", "P(U|I)", "PAvPU3D"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def evaluate(pred, target, unc, cfg: PatchConfig = PatchConfig(), sample: str = "", method: str = "") -> MetricsReport:
    pred, target, unc = _squeeze(pred), _squeeze(target), _squeeze(unc)
    grid = patch_labels(pred, target, unc, cfg)
    counts = grid.counts
    p_ac, p_ui = conditional_probs(grid)
    return MetricsReport(
        sample=sample,
        method=method,
        accuracy=voxel_accuracy(pred, target),
        uq_mean=uq_mean(unc),
        p_accurate_given_certain=p_ac,
        p_uncertain_given_inaccurate=p_ui,
        pavpu3d=pavpu_from_counts(counts),
        uncertainty_threshold=grid.uncertainty_threshold,
        **counts,
    )
