"""Integral volumes and randomized 3-D box features.

A feature reads the mean intensity of one box (``single``) or the difference
of two box means (``difference``), each box placed at the query voxel plus a
signed offset.  Boxes are centred on their anchor (``anchor - size // 2``)
and clamped to the grid, so every response is defined at the border.

Feature pools are stored as an ``int32`` table with :data:`POOL_COLUMNS`
columns so the numba kernels can read them directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .volume import Volume

SINGLE, DIFFERENCE = 0, 1
KIND_NAMES = {SINGLE: "single", DIFFERENCE: "difference"}
# kind, c1, ox1, oy1, oz1, sx1, sy1, sz1, c2, ox2, oy2, oz2, sx2, sy2, sz2
POOL_COLUMNS = 15


@dataclass(frozen=True, eq=False)
class IntegralVolume:
    """Zero-padded cumulative sums, shape ``(nx+1, ny+1, nz+1, channels)``."""

    table: np.ndarray

    @property
    def dims(self) -> tuple:
        return tuple(int(d) - 1 for d in self.table.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.table.shape[3])

    def box_sum(self, channel: int, lo: Sequence[int], hi: Sequence[int]) -> float:
        """Sum over the half-open box ``[lo, hi)`` with eight lookups."""
        return _box_sum(self.table, channel, lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


def build_integral(image: Volume) -> IntegralVolume:
    data = np.asarray(image.data, dtype=np.float64)
    nx, ny, nz, nc = data.shape
    table = np.zeros((nx + 1, ny + 1, nz + 1, nc), dtype=np.float64)
    table[1:, 1:, 1:, :] = data.cumsum(0).cumsum(1).cumsum(2)
    table.flags.writeable = False
    return IntegralVolume(table)


@dataclass(frozen=True)
class BoxFeature:
    kind: str
    channels: tuple
    offsets: tuple
    sizes: tuple

    def __post_init__(self):
        nbox = 1 if self.kind == "single" else 2
        if self.kind not in ("single", "difference"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if len(self.channels) != nbox or len(self.offsets) != nbox or len(self.sizes) != nbox:
            raise ValueError(f"{self.kind} feature needs {nbox} box(es)")
        for size in self.sizes:
            if len(size) != 3 or min(size) < 1:
                raise ValueError(f"box sizes must be >= 1 per axis, got {size}")

    def to_row(self) -> np.ndarray:
        row = np.zeros(POOL_COLUMNS, dtype=np.int32)
        row[0] = SINGLE if self.kind == "single" else DIFFERENCE
        for b in range(len(self.sizes)):
            base = 1 + 7 * b
            row[base] = self.channels[b]
            row[base + 1 : base + 4] = self.offsets[b]
            row[base + 4 : base + 7] = self.sizes[b]
        return row

    @classmethod
    def from_row(cls, row) -> "BoxFeature":
        row = [int(v) for v in row]
        nbox = 1 if row[0] == SINGLE else 2
        boxes = [row[1 + 7 * b : 8 + 7 * b] for b in range(nbox)]
        return cls(
            KIND_NAMES[row[0]],
            tuple(b[0] for b in boxes),
            tuple(tuple(b[1:4]) for b in boxes),
            tuple(tuple(b[4:7]) for b in boxes),
        )


@dataclass(frozen=True)
class FeatureRanges:
    offset_min: int = -15
    offset_max: int = 15
    size_min: int = 1
    size_max: int = 9
    difference_fraction: float = 0.5

    def validate(self) -> None:
        if self.offset_min > self.offset_max:
            raise ValueError("offset_min > offset_max")
        if self.size_min < 1 or self.size_min > self.size_max:
            raise ValueError("box sizes must satisfy 1 <= size_min <= size_max")
        if not 0.0 <= self.difference_fraction <= 1.0:
            raise ValueError("difference_fraction must lie in [0, 1]")


def sample_pool_table(
    rng: np.random.Generator, ranges: FeatureRanges, count: int, channels: int
) -> np.ndarray:
    """Draw ``count`` random features as a pool table."""
    if count < 1:
        raise ValueError("feature pool count must be >= 1")
    if channels < 1:
        raise ValueError("channels must be >= 1")
    ranges.validate()
    table = np.zeros((count, POOL_COLUMNS), dtype=np.int32)
    table[:, 0] = rng.random(count) < ranges.difference_fraction
    for base in (1, 8):
        table[:, base] = rng.integers(0, channels, count)
        table[:, base + 1 : base + 4] = rng.integers(ranges.offset_min, ranges.offset_max + 1, (count, 3))
        table[:, base + 4 : base + 7] = rng.integers(ranges.size_min, ranges.size_max + 1, (count, 3))
    # second box is unused by single-box features; zero it for a canonical layout
    table[table[:, 0] == SINGLE, 8:] = 0
    return table


def sample_feature_pool(
    rng: np.random.Generator, ranges: FeatureRanges, count: int, channels: int = 1
) -> list:
    return [BoxFeature.from_row(r) for r in sample_pool_table(rng, ranges, count, channels)]


def feature_response(f: BoxFeature, integrals: IntegralVolume, voxel: Sequence[int]) -> float:
    x, y, z = (int(v) for v in voxel)
    nx, ny, nz = integrals.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise IndexError(f"voxel {voxel} outside grid {integrals.dims}")
    return float(_response(integrals.table, f.to_row(), x, y, z))


def pool_responses(table: np.ndarray, integrals: IntegralVolume, points: np.ndarray) -> np.ndarray:
    """Responses of every feature in ``table`` at every point, shape ``(n_features, n_points)``."""
    pts = np.ascontiguousarray(points, dtype=np.int64).reshape(-1, 3)
    feats = np.arange(len(table), dtype=np.int64)
    return _responses(integrals.table, np.ascontiguousarray(table, dtype=np.int32), feats, pts)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _box_sum(ii, c, x0, x1, y0, y1, z0, z1):
    return (
        ii[x1, y1, z1, c]
        - ii[x0, y1, z1, c]
        - ii[x1, y0, z1, c]
        - ii[x1, y1, z0, c]
        + ii[x0, y0, z1, c]
        + ii[x0, y1, z0, c]
        + ii[x1, y0, z0, c]
        - ii[x0, y0, z0, c]
    )


@numba.njit(cache=True, inline="always")
def _clamp_span(anchor, size, n):
    lo = anchor - size // 2
    hi = lo + size
    if lo < 0:
        lo = 0
    if lo > n - 1:
        lo = n - 1
    if hi > n:
        hi = n
    if hi < lo + 1:
        hi = lo + 1
    return lo, hi


@numba.njit(cache=True, inline="always")
def _box_mean(ii, row, base, x, y, z):
    nx = ii.shape[0] - 1
    ny = ii.shape[1] - 1
    nz = ii.shape[2] - 1
    x0, x1 = _clamp_span(x + row[base + 1], row[base + 4], nx)
    y0, y1 = _clamp_span(y + row[base + 2], row[base + 5], ny)
    z0, z1 = _clamp_span(z + row[base + 3], row[base + 6], nz)
    s = _box_sum(ii, row[base], x0, x1, y0, y1, z0, z1)
    return s / ((x1 - x0) * (y1 - y0) * (z1 - z0))


@numba.njit(cache=True)
def _response(ii, row, x, y, z):
    v = _box_mean(ii, row, 1, x, y, z)
    if row[0] == 1:
        v -= _box_mean(ii, row, 8, x, y, z)
    return v


@numba.njit(cache=True)
def _responses(ii, table, feats, pts):
    out = np.empty((feats.shape[0], pts.shape[0]), dtype=np.float64)
    for i in range(feats.shape[0]):
        row = table[feats[i]]
        for j in range(pts.shape[0]):
            out[i, j] = _response(ii, row, pts[j, 0], pts[j, 1], pts[j, 2])
    return out
