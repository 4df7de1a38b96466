"""Voxel grids and labels.

Volumes are plain ``numpy`` arrays laid out as ``(depth, height, width,
channels)``; label volumes are ``uint8`` arrays of shape ``(depth, height,
width)`` holding only 0 and 1.
"""

from __future__ import annotations

import numpy as np

from .errors import BadShape, ConstantVolume, ShapeMismatch


def as_volume(data, dtype=None) -> np.ndarray:
    """Coerce ``data`` to a 4-axis volume, adding a channel axis to 3-axis input."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise BadShape(f"volume must have 3 or 4 axes, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise BadShape(f"volume axes must be >= 1, got shape {arr.shape}")
    return arr


def as_labels(data) -> np.ndarray:
    """Coerce ``data`` to a binary ``uint8`` label volume of shape (d, h, w)."""
    arr = np.asarray(data)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise BadShape(f"label volume must have 3 axes, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("label volume must contain only 0 and 1")
    return arr.astype(np.uint8)


def normalize(v: np.ndarray) -> np.ndarray:
    """Standardize a whole scan to zero mean and unit (population) variance.

    Statistics are taken over every voxel and channel of the scan, so chunks
    cut afterwards share one normalization.
    """
    data = np.asarray(v, dtype=np.float64)
    mean = data.mean()
    std = data.std()
    if data.size < 2 or std == 0.0:
        raise ConstantVolume("cannot normalize a volume whose voxels are all equal")
    out = (data - mean) / std
    return out.astype(np.result_type(np.asarray(v).dtype, np.float32))


def voxel_accuracy(pred, target) -> float:
    """Fraction of voxels where ``pred`` equals ``target``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} != target shape {target.shape}")
    return float(np.mean(pred == target))
