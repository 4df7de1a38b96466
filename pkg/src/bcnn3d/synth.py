"""Synthetic scan/label pairs standing in for real CT data.

``sphere`` volumes hold bright particles on a dark background with the
particles labelled. ``slab-with-void`` volumes hold a mid-gray slab (a weld
seam) containing bright spherical voids, and the voids are labelled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import BadConfig, BodyDoesNotFit
from .volume import normalize

KINDS = ("sphere", "slab-with-void")


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_bodies: int = 3
    kind: str = "sphere"
    radius_range: tuple[float, float] = (3.0, 7.0)
    noise_sigma: float = 0.3
    blur_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        if self.kind not in KINDS:
            raise BadConfig(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise BadConfig("noise_sigma and blur_sigma must be non-negative")
        if len(self.shape) != 3 or min(self.shape) < 1 or self.n_bodies < 0:
            raise BadConfig(f"invalid synth spec {self}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise BadConfig(f"radius_range must satisfy 0 < min <= max, got {self.radius_range}")

    def to_dict(self) -> dict:
        return asdict(self)


def sphere_mask(shape, center, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return d2 <= radius**2


def _place(rng, lo_bounds, hi_bounds, radius):
    lo = [b + radius for b in lo_bounds]
    hi = [b - 1 - radius for b in hi_bounds]
    if any(h < l for l, h in zip(lo, hi)):
        raise BodyDoesNotFit(f"a body of radius {radius} does not fit in {tuple(hi_bounds)}")
    return [rng.uniform(l, h) for l, h in zip(lo, hi)]


def _sphere_volume(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    label = np.zeros(spec.shape, dtype=bool)
    for _ in range(spec.n_bodies):
        r = rng.uniform(*spec.radius_range)
        c = _place(rng, (0, 0, 0), spec.shape, r)
        label |= sphere_mask(spec.shape, c, r)
    return label.astype(np.float64), label


def _weld_volume(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    d, h, w = spec.shape
    half = max(2 * spec.radius_range[1] + 2, h / 4)
    top = int(round(h / 2 - half))
    bottom = int(round(h / 2 + half))
    if top < 0 or bottom > h:
        raise BodyDoesNotFit(f"slab with voids of radius {spec.radius_range[1]} does not fit in {spec.shape}")
    intensity = np.zeros(spec.shape)
    intensity[:, top:bottom, :] = 0.5
    voids = np.zeros(spec.shape, dtype=bool)
    for _ in range(spec.n_bodies):
        r = rng.uniform(*spec.radius_range)
        c = _place(rng, (0, top, 0), (d, bottom, w), r)
        voids |= sphere_mask(spec.shape, c, r)
    intensity[voids] = 1.0
    return intensity, voids


def synth_pair(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One ``(scan, label)`` pair: scan is (d, h, w, 1) float32, label (d, h, w) uint8."""
    make = _sphere_volume if spec.kind == "sphere" else _weld_volume
    clean, label = make(spec, rng)
    scan = gaussian_filter(clean, spec.blur_sigma) if spec.blur_sigma > 0 else clean
    if spec.noise_sigma > 0:
        scan = scan + rng.normal(0.0, spec.noise_sigma, size=scan.shape)
    scan = normalize(scan[..., None]).astype(np.float32)
    return scan, label.astype(np.uint8)


def synth_dataset(spec: SynthSpec, count: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` independent pairs, reproducible from ``spec.seed``."""
    children = np.random.SeedSequence(spec.seed).spawn(count)
    return [synth_pair(spec, np.random.default_rng(s)) for s in children]
