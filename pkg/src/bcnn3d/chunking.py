"""Overlapping fixed-size decomposition of volumes too large for one pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, VolumeTooSmall
from .volume import as_volume


@dataclass(frozen=True)
class ChunkSpec:
    """Chunk extent and overlap.

    ``step`` controls overlap: 1 tiles without overlap, 2 overlaps by half,
    3 by two thirds. The stride along axis ``i`` is ``chunk_size[i] // step``.
    """

    chunk_size: tuple[int, int, int]
    step: int = 3

    def __post_init__(self):
        size = tuple(int(s) for s in self.chunk_size)
        if len(size) != 3 or min(size) < 1:
            raise BadConfig(f"chunk_size must be three positive ints, got {self.chunk_size}")
        if self.step < 1:
            raise BadConfig(f"step must be >= 1, got {self.step}")
        if any(s < self.step for s in size):
            raise BadConfig(f"every chunk_size entry must be >= step ({self.step}), got {size}")
        object.__setattr__(self, "chunk_size", size)

    @property
    def strides(self) -> tuple[int, int, int]:
        return tuple(s // self.step for s in self.chunk_size)


@dataclass
class ChunkSet:
    chunks: list[np.ndarray]
    coords: list[tuple[int, int, int]]
    original_shape: tuple[int, ...]
    chunk_size: tuple[int, int, int] = field(default=(0, 0, 0))

    def __len__(self) -> int:
        return len(self.chunks)


def chunk_origins(shape, spec: ChunkSpec) -> list[tuple[int, int, int]]:
    """Chunk origins in emission order for a volume of spatial ``shape``.

    Mirrors the nested z/x/y scan with its boundary flags: once an axis
    overruns its last legal origin, a single flush chunk is placed at that
    origin unless it was already visited (last origin is 0 or a multiple of
    the stride).
    """
    cs = spec.chunk_size
    z_max, x_max, y_max = (shape[i] - cs[i] for i in range(3))
    if z_max < 0 or x_max < 0 or y_max < 0:
        raise VolumeTooSmall(f"volume {tuple(shape[:3])} too small for chunk size {cs}")
    sz, sx, sy = spec.strides

    coords = []
    z_flag = False
    for z in range(0, shape[0], sz):
        x_flag = False
        if z_flag:
            break
        if z > z_max:
            if z_max == 0 or z_max % sz == 0:
                break
            z = z_max
            z_flag = True
        for x in range(0, shape[1], sx):
            y_flag = False
            if x_flag:
                break
            if x > x_max:
                if x_max == 0 or x_max % sx == 0:
                    break
                x = x_max
                x_flag = True
            for y in range(0, shape[2], sy):
                if y_flag:
                    break
                if y > y_max:
                    if y_max == 0 or y_max % sy == 0:
                        break
                    y = y_max
                    y_flag = True
                coords.append((z, x, y))
    return coords


def chunk(v, spec: ChunkSpec) -> ChunkSet:
    """Cut ``v`` (d, h, w, c) into copies of shape ``spec.chunk_size + (c,)``."""
    v = as_volume(v)
    cs = spec.chunk_size
    coords = chunk_origins(v.shape, spec)
    chunks = [
        v[z : z + cs[0], x : x + cs[1], y : y + cs[2], :].copy() for z, x, y in coords
    ]
    return ChunkSet(chunks=chunks, coords=coords, original_shape=v.shape, chunk_size=cs)


def coverage_counts(cs: ChunkSet) -> np.ndarray:
    """Per-voxel number of chunks containing each voxel, shape (d, h, w, 1)."""
    counts = np.zeros(tuple(cs.original_shape[:3]) + (1,), dtype=np.int64)
    size = cs.chunk_size
    for z, x, y in cs.coords:
        counts[z : z + size[0], x : x + size[1], y : y + size[2]] += 1
    return counts
