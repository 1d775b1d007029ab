"""Iterative ring detection: from the center outward, one boundary per step."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from .errors import AllUndefined, EmptyMask, NoBoundaryAhead
from .model import NEXT_RING
from .polar import (DEFAULT_ALPHA, DEFAULT_N_RADIAL, M_MIN, PolarGrid, RingBoundary,
                    assemble_patch, boundary_from_mask, build_polar_grid, center_of_mass,
                    circular_interpolate, compute_angular_resolution, estimate_radial_extent,
                    rasterize_rings, sample_grid)
from .segmentation import PixelClassifier, SegMaps

log = logging.getLogger(__name__)


class NextRingModel(Protocol):
    def __call__(self, patch: np.ndarray, grid: PolarGrid, ring_index: int) -> np.ndarray:
        """Return (2, N, M) logits; channel 1 marks cells inside the next boundary."""


class StopReason(str, Enum):
    BACKGROUND_REACHED = "BackgroundReached"
    NO_BOUNDARY_AHEAD = "NoBoundaryAhead"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class InferenceConfig:
    alpha: float = DEFAULT_ALPHA
    n_radial: int = DEFAULT_N_RADIAL
    m_min: int = M_MIN
    max_iters: int = 100
    bg_threshold: float = 0.5
    # radial offsets (px) outside a boundary where the background test samples
    bg_offsets: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0, 6.0)


@dataclass
class DetectionResult:
    boundaries: list[RingBoundary]
    label_map: np.ndarray
    iterations: int
    stop_reason: StopReason
    origin: tuple[float, float] = (0.0, 0.0)
    low_confidence: list[int] = field(default_factory=list)


def extract_next_boundary(logits: np.ndarray, grid: PolarGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per column, the radius of the last positive cell when the positives form a prefix.

    Returns ``(radii, clamped)``; ambiguous columns are NaN and columns that are
    positive all the way out are clamped to the outermost radius.
    """
    positive = np.argmax(logits, axis=0) == NEXT_RING
    n = positive.shape[0]
    # length of the leading run of positives in each column
    prefix = np.where(positive.all(axis=0), n, np.argmin(positive, axis=0))
    count = positive.sum(axis=0)
    ok = (count > 0) & (count == prefix)
    cols = np.arange(positive.shape[1])
    radii = np.full(positive.shape[1], np.nan)
    radii[ok] = grid.radii[prefix[ok] - 1, cols[ok]]
    return radii, ok & (prefix == n)


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n == 0:
        raise EmptyMask("no center ring detected")
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (1 + int(np.argmax(sizes)))


def center_boundary(seg: SegMaps, config: InferenceConfig) -> RingBoundary:
    """First ring boundary, read off the detected center ring."""
    mask = largest_component(seg.center > 0.5)
    origin = center_of_mass(mask)
    r_est = math.sqrt(mask.sum() / math.pi)
    m = max(config.m_min, int(math.floor(config.alpha * r_est + 0.5)))
    return boundary_from_mask(mask, origin, m, ring_index=1)


def background_reached(seg: SegMaps, boundary: RingBoundary, config: InferenceConfig) -> bool:
    """Median background probability just outside ``boundary`` exceeds the threshold."""
    offsets = np.asarray(config.bg_offsets, dtype=np.float64)
    radii = boundary.radii[None, :] + offsets[:, None]
    grid = PolarGrid(boundary.origin, radii, boundary.angles)
    values = sample_grid(seg.background, grid)
    return bool(np.median(values) > config.bg_threshold)


def next_ring_step(image: np.ndarray, seg: SegMaps, prev: RingBoundary, model: NextRingModel,
                   config: InferenceConfig) -> RingBoundary:
    m = compute_angular_resolution(prev, config.alpha, config.m_min)
    prev = prev.resample(m)
    extent = estimate_radial_extent(seg.boundaries, prev.origin, prev)
    grid = build_polar_grid(prev.origin, prev, extent, config.n_radial, m)
    patch = assemble_patch(image, seg.background, seg.boundaries, grid)
    logits = model(patch, grid, prev.ring_index)
    radii, _ = extract_next_boundary(logits, grid)
    low_conf = False
    try:
        radii = circular_interpolate(radii)
    except AllUndefined:
        log.warning("ring %d: every column ambiguous, advancing by 1 px", prev.ring_index + 1)
        radii = prev.radii + 1.0
        low_conf = True
    radii = np.maximum(radii, prev.radii)
    return RingBoundary(radii, prev.origin, prev.ring_index + 1, low_conf)


def detect_rings(image: np.ndarray, classifier: PixelClassifier | Callable, model: NextRingModel,
                 config: InferenceConfig | None = None, max_iters: int | None = None,
                 seg: SegMaps | None = None) -> DetectionResult:
    config = config or InferenceConfig()
    max_iters = config.max_iters if max_iters is None else max_iters
    if seg is None:
        seg = classifier(image)
    boundaries = [center_boundary(seg, config)]
    while True:
        if background_reached(seg, boundaries[-1], config):
            reason = StopReason.BACKGROUND_REACHED
            break
        if len(boundaries) >= max_iters:
            reason = StopReason.MAX_ITERATIONS
            break
        try:
            boundaries.append(next_ring_step(image, seg, boundaries[-1], model, config))
        except NoBoundaryAhead:
            reason = StopReason.NO_BOUNDARY_AHEAD
            break
    labels = rasterize_rings(boundaries, image.shape[:2])
    low = [b.ring_index for b in boundaries if b.low_confidence]
    return DetectionResult(boundaries, labels, len(boundaries), reason, boundaries[0].origin, low)
