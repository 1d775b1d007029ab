"""Polar sampling grids around a ring center.

Coordinates follow the image convention: ``x`` is the column, ``y`` the row,
and an angle ``phi`` maps to the offset ``(cos phi, sin phi)`` in ``(x, y)``.
Rasters are indexed ``[row, col]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import AllUndefined, EmptyMask, NoBoundaryAhead

M_MIN = 16
DEFAULT_ALPHA = 2 * math.pi
DEFAULT_N_RADIAL = 256
# fraction of rays that must hit a boundary for the extent estimate to count
MIN_HIT_FRACTION = 0.05


def uniform_angles(m: int) -> np.ndarray:
    return 2 * np.pi * np.arange(m) / m


@dataclass(frozen=True)
class RingBoundary:
    """Outer boundary of one ring as radii at ``M`` uniformly spaced angles."""

    radii: np.ndarray
    origin: tuple[float, float]
    ring_index: int
    low_confidence: bool = False

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=np.float64)
        if radii.ndim != 1 or radii.size == 0:
            raise ValueError("boundary radii must be a non-empty 1D array")
        if not np.all(np.isfinite(radii)) or np.any(radii < 0):
            raise ValueError("boundary radii must be finite and non-negative")
        if self.ring_index < 0:
            raise ValueError("ring_index must be >= 0")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_angles(self) -> int:
        return self.radii.size

    @property
    def angles(self) -> np.ndarray:
        return uniform_angles(self.n_angles)

    def radii_at(self, angles: np.ndarray) -> np.ndarray:
        """Circular linear interpolation of the radii at arbitrary angles."""
        return np.interp(np.mod(angles, 2 * np.pi), self.angles, self.radii, period=2 * np.pi)

    def resample(self, m: int) -> "RingBoundary":
        if m == self.n_angles:
            return self
        return RingBoundary(self.radii_at(uniform_angles(m)), self.origin, self.ring_index,
                            self.low_confidence)


@dataclass(frozen=True)
class PolarGrid:
    origin: tuple[float, float]
    radii: np.ndarray  # (N, M)
    angles: np.ndarray = field(repr=False)  # (M,)

    @property
    def n_radial(self) -> int:
        return self.radii.shape[0]

    @property
    def n_angular(self) -> int:
        return self.radii.shape[1]

    def cartesian(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` pixel coordinates of every grid cell, each (N, M)."""
        x = self.origin[0] + self.radii * np.cos(self.angles)[None]
        y = self.origin[1] + self.radii * np.sin(self.angles)[None]
        return x, y


def center_of_mass(mask: np.ndarray) -> tuple[float, float]:
    """Mean ``(x, y)`` of the positive pixels of a binary mask."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMask("mask has no positive pixel")
    return float(cols.mean()), float(rows.mean())


def compute_angular_resolution(prev_boundary: RingBoundary, alpha: float = DEFAULT_ALPHA,
                               m_min: int = M_MIN) -> int:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    m = math.floor(alpha * float(np.mean(prev_boundary.radii)) + 0.5)
    return max(int(m_min), int(m))


def _ray_points(origin, radii: np.ndarray, angles: np.ndarray, distances: np.ndarray):
    r = radii[:, None] + distances[None, :]
    x = origin[0] + r * np.cos(angles)[:, None]
    y = origin[1] + r * np.sin(angles)[:, None]
    return x, y


def estimate_radial_extent(boundary_map: np.ndarray, origin, prev_boundary: RingBoundary,
                           threshold: float = 0.5, min_gap: float = 3.0,
                           step: float = 1.0, max_distance: float | None = None) -> float:
    """Radial extent of the next polar grid: 1.5 x 95th percentile of hit distances.

    Each ray starts at the previous boundary and walks outward. The positive run
    the ray starts in (the previous boundary itself) and any run starting closer
    than ``min_gap`` are skipped; the distance to the next rising edge is the hit.
    """
    bd = np.asarray(boundary_map) > threshold
    if max_distance is None:
        max_distance = float(np.hypot(*bd.shape))
    d = np.arange(0.0, max_distance + step, step)
    x, y = _ray_points(origin, prev_boundary.radii, prev_boundary.angles, d)
    pos = ndimage.map_coordinates(bd.astype(np.uint8), [y.ravel(), x.ravel()], order=0,
                                  mode="constant", cval=0).reshape(x.shape).astype(bool)
    rising = np.zeros_like(pos)
    rising[:, 1:] = pos[:, 1:] & ~pos[:, :-1]
    rising[:, d < min_gap] = False
    hit = rising.any(axis=1)
    m = prev_boundary.n_angles
    if hit.sum() < max(1, math.ceil(MIN_HIT_FRACTION * m)):
        raise NoBoundaryAhead(f"only {int(hit.sum())} of {m} rays hit a boundary")
    distances = np.sort(d[np.argmax(rising[hit], axis=1)])
    return 1.5 * float(nearest_rank_percentile(distances, 95.0))


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def build_polar_grid(origin, prev_boundary: RingBoundary, extent: float,
                     n_radial: int = DEFAULT_N_RADIAL, n_angular: int | None = None) -> PolarGrid:
    if extent <= 0:
        raise ValueError("extent must be positive")
    if n_radial < 2:
        raise ValueError("n_radial must be >= 2")
    if n_angular is not None:
        prev_boundary = prev_boundary.resample(n_angular)
    inner = prev_boundary.radii
    t = np.arange(n_radial, dtype=np.float64) / (n_radial - 1)
    radii = inner[None, :] + extent * t[:, None]
    radii[0] = inner
    return PolarGrid((float(origin[0]), float(origin[1])), radii, prev_boundary.angles)


def sample_grid(raster: np.ndarray, grid: PolarGrid, mode: str = "bilinear") -> np.ndarray:
    """Sample a (H, W) or (H, W, C) raster on the grid; returns (N, M) or (C, N, M)."""
    order = {"bilinear": 1, "nearest": 0}[mode]
    x, y = grid.cartesian()
    coords = [y.ravel(), x.ravel()]
    raster = np.asarray(raster)

    def _one(channel):
        out = ndimage.map_coordinates(channel, coords, order=order, mode="constant", cval=0,
                                      prefilter=False)
        return out.reshape(x.shape)

    if raster.ndim == 2:
        return _one(raster)
    return np.stack([_one(raster[..., c]) for c in range(raster.shape[-1])])


def assemble_patch(image: np.ndarray, background: np.ndarray, boundaries: np.ndarray,
                   grid: PolarGrid) -> np.ndarray:
    """Build the 7-channel network input ``[R, G, B, bg, bd, rho, omega]``.

    The last channel is a zero placeholder, filled by the network itself.
    """
    h, w = image.shape[:2]
    rgb = sample_grid(image.astype(np.float32, copy=False), grid)
    bg = sample_grid(background.astype(np.float32, copy=False), grid)
    bd = sample_grid(boundaries.astype(np.float32, copy=False), grid)
    rho = grid.radii / math.hypot(h, w)
    omega = np.zeros_like(rho)
    return np.concatenate([rgb, bg[None], bd[None], rho[None], omega[None]]).astype(np.float32)


def circular_interpolate(values: Sequence[float]) -> np.ndarray:
    """Fill NaN entries by linear interpolation between circular neighbours."""
    v = np.asarray(values, dtype=np.float64)
    defined = np.isfinite(v)
    if not defined.any():
        raise AllUndefined("no defined entry to interpolate from")
    if defined.all():
        return v.copy()
    idx = np.arange(v.size)
    out = v.copy()
    out[~defined] = np.interp(idx[~defined], idx[defined], v[defined], period=v.size)
    return out


def boundary_from_mask(mask: np.ndarray, origin, n_angles: int, ring_index: int = 1,
                       step: float = 0.5) -> RingBoundary:
    """Radii where rays from ``origin`` first leave ``mask`` (sub-pixel, bilinear)."""
    m = np.asarray(mask, dtype=np.float32)
    angles = uniform_angles(n_angles)
    d = np.arange(0.0, math.hypot(*m.shape) + step, step)
    x, y = _ray_points(origin, np.zeros(n_angles), angles, d)
    v = ndimage.map_coordinates(m, [y.ravel(), x.ravel()], order=1, mode="constant", cval=0,
                                prefilter=False).reshape(x.shape)
    inside = v >= 0.5
    # first sample outside the mask, after index 0
    outside = ~inside
    outside[:, 0] = False
    exit_idx = np.where(outside.any(axis=1), np.argmax(outside, axis=1), d.size - 1)
    radii = np.zeros(n_angles)
    ok = inside[:, 0]
    k = exit_idx[ok]
    rows = np.nonzero(ok)[0]
    v0, v1 = v[rows, k - 1], v[rows, k]
    frac = np.clip((v0 - 0.5) / np.maximum(v0 - v1, 1e-12), 0.0, 1.0)
    radii[ok] = d[k - 1] + frac * step
    return RingBoundary(radii, origin, ring_index)


def boundary_from_labels(labels: np.ndarray, origin, ring_index: int, n_angles: int) -> RingBoundary:
    """Outer boundary of ring ``ring_index`` in an instance label map."""
    labels = np.asarray(labels)
    mask = (labels >= 1) & (labels <= ring_index)
    return boundary_from_mask(mask, origin, n_angles, ring_index)


def rasterize_rings(boundaries: Sequence[RingBoundary], shape: tuple[int, int]) -> np.ndarray:
    """Instance label map: pixel gets the first ring whose boundary encloses it."""
    h, w = shape
    labels = np.zeros((h, w), dtype=np.int32)
    if not boundaries:
        return labels
    ox, oy = boundaries[0].origin
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - ox, yy - oy
    dist = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    outer = np.zeros_like(dist)
    unassigned = np.ones((h, w), dtype=bool)
    for k, b in enumerate(boundaries, start=1):
        outer = np.maximum(outer, b.radii_at(theta))
        hit = unassigned & (dist <= outer)
        labels[hit] = k
        unassigned &= ~hit
    return labels

