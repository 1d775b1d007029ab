"""Procedural cross-section images with known concentric ring annotations.

Rings grow outward as per-angle width profiles. A wedging ring tapers to zero
width over an arc; a disconnected ring has two such arcs, which leaves two
separate pieces with the same label.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigInvalid
from .polar import RingBoundary, rasterize_rings, sample_grid, uniform_angles
from .segmentation import SegMaps, make_targets

GT_ANGLES = 1024
WOOD_RGB = np.array([0.86, 0.58, 0.64])
PITH_RGB = np.array([0.93, 0.80, 0.78])
BACKGROUND_RGB = np.array([0.95, 0.95, 0.97])
BOUNDARY_RGB = np.array([0.35, 0.12, 0.25])


@dataclass
class SynthConfig:
    image_size: int = 512
    n_rings: int = 5
    n_rings_max: int | None = None   # if set, draw the ring count from [n_rings, n_rings_max]
    mean_ring_width: float | None = None  # None: fill ~85% of the image radius
    width_jitter: float = 0.3
    wedging_prob: float = 0.0
    wedge_arc: tuple[float, float] = (0.6, 1.6)  # radians of zero width
    disconnected_prob: float = 0.0
    boundary_contrast: float = 0.6
    noise_sigma: float = 0.03
    texture: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.wedge_arc, (int, float)):
            self.wedge_arc = (float(self.wedge_arc), float(self.wedge_arc))
        self.wedge_arc = tuple(float(a) for a in self.wedge_arc)
        self.validate()

    def validate(self):
        if self.n_rings < 1:
            raise ConfigInvalid("n_rings must be >= 1")
        if self.n_rings_max is not None and self.n_rings_max < self.n_rings:
            raise ConfigInvalid("n_rings_max must be >= n_rings")
        if self.image_size < 32:
            raise ConfigInvalid("image_size must be >= 32")
        if not 0 <= self.wedging_prob <= 1 or not 0 <= self.disconnected_prob <= 1:
            raise ConfigInvalid("probabilities must lie in [0, 1]")
        if not 0 <= self.width_jitter < 1:
            raise ConfigInvalid("width_jitter must lie in [0, 1)")
        if self.mean_ring_width is not None and self.mean_ring_width <= 0:
            raise ConfigInvalid("mean_ring_width must be positive")
        lo, hi = self.wedge_arc
        if not 0 <= lo <= hi < 2 * math.pi:
            raise ConfigInvalid("wedge_arc must satisfy 0 <= lo <= hi < 2*pi")
        if self.noise_sigma < 0 or self.texture < 0 or not 0 <= self.boundary_contrast <= 1:
            raise ConfigInvalid("noise_sigma, texture >= 0 and boundary_contrast in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wedge_arc"] = list(self.wedge_arc)
        return d


@dataclass
class Sample:
    image: np.ndarray         # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray        # (H, W) int32, 0 = background, k = ring k
    boundaries: list[RingBoundary]
    origin: tuple[float, float]

    @property
    def n_rings(self) -> int:
        return len(self.boundaries)


def _smooth_profile(rng, angles, amplitude, max_freq=3):
    out = np.zeros_like(angles)
    for f in range(1, max_freq + 1):
        out += rng.uniform(0, amplitude / f) * np.cos(f * angles + rng.uniform(0, 2 * np.pi))
    return out


def _gap_factor(angles, center, arc, taper):
    """1 away from the gap, 0 over ``arc`` radians around ``center``, smooth ramps between."""
    delta = np.abs(np.angle(np.exp(1j * (angles - center))))
    t = np.clip((delta - arc / 2) / taper, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def ring_radii(config: SynthConfig, rng: np.random.Generator, n_rings: int):
    """Cumulative boundary radii, shape (n_rings, GT_ANGLES)."""
    angles = uniform_angles(GT_ANGLES)
    max_radius = 0.45 * config.image_size
    width = config.mean_ring_width or 0.85 * max_radius / (n_rings + 0.5)
    shape = 1 + _smooth_profile(rng, angles, 0.08, 2)  # common eccentricity of the stem
    widths = []
    for k in range(n_rings):
        base = width * (1.5 if k == 0 else 1 + config.width_jitter * rng.uniform(-1, 1))
        w = base * shape * (1 + _smooth_profile(rng, angles, 0.2 if k else 0.05))
        gap = np.ones_like(angles)
        if k > 0 and rng.uniform() < config.wedging_prob:
            lo, hi = config.wedge_arc
            center = rng.uniform(0, 2 * np.pi)
            taper = rng.uniform(0.4, 0.8)
            gap = _gap_factor(angles, center, rng.uniform(lo, hi), taper)
            if rng.uniform() < config.disconnected_prob:
                gap *= _gap_factor(angles, center + np.pi, rng.uniform(lo, hi), taper)
        widths.append(np.maximum(w, 0.3 * base) * gap)
    radii = np.cumsum(widths, axis=0)
    scale = min(1.0, max_radius / radii.max())
    return radii * scale


def _texture(rng, shape, amplitude):
    """Cell-like speckle: blurred noise with sharpened cell walls."""
    if amplitude == 0:
        return np.zeros(shape)
    cells = ndimage.gaussian_filter(rng.standard_normal(shape), 1.2)
    cells = np.tanh(3 * cells / (cells.std() + 1e-12))
    return amplitude * cells


def generate_sample(config: SynthConfig, seed: int | None = None) -> Sample:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    size = config.image_size
    n_rings = config.n_rings
    if config.n_rings_max is not None:
        n_rings = int(rng.integers(config.n_rings, config.n_rings_max + 1))
    origin = tuple(size / 2 + rng.uniform(-0.04, 0.04, 2) * size)
    radii = ring_radii(config, rng, n_rings)
    boundaries = [RingBoundary(r, origin, k + 1) for k, r in enumerate(radii)]
    labels = rasterize_rings(boundaries, (size, size))

    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(xx - origin[0], yy - origin[1])
    theta = np.mod(np.arctan2(yy - origin[1], xx - origin[0]), 2 * np.pi)
    outer = np.maximum.accumulate(np.stack([b.radii_at(theta) for b in boundaries]), axis=0)

    image = np.broadcast_to(BACKGROUND_RGB, (size, size, 3)).copy()
    wood = labels > 0
    k = np.clip(labels - 1, 0, n_rings - 1)
    r_out = np.take_along_axis(outer, k[None], 0)[0]
    r_in = np.where(k > 0, np.take_along_axis(outer, np.maximum(k - 1, 0)[None], 0)[0], 0.0)
    depth = np.clip((dist - r_in) / np.maximum(r_out - r_in, 1e-6), 0, 1)
    tone = rng.uniform(0.9, 1.05, n_rings + 1)[labels] * (1 - 0.22 * depth ** 2)
    color = np.where((labels == 1)[..., None], PITH_RGB, WOOD_RGB)
    image[wood] = (color * tone[..., None])[wood]
    image[wood] *= (1 + _texture(rng, (size, size), config.texture))[wood][:, None]

    # dark boundary curves at every ring's outer edge (radial distance)
    edge = np.min(np.abs(outer - dist[None]), axis=0)
    dark = config.boundary_contrast * np.exp(-(edge / 1.2) ** 2)
    image = image * (1 - dark[..., None]) + BOUNDARY_RGB * dark[..., None]
    image += rng.normal(0, config.noise_sigma, image.shape) if config.noise_sigma else 0
    return Sample(np.clip(image, 0, 1).astype(np.float32), labels, boundaries, origin)


def generate_dataset(config: SynthConfig, count: int) -> list[Sample]:
    seeds = np.random.SeedSequence(config.seed).generate_state(max(count, 1))
    return [generate_sample(config, int(s)) for s in seeds[:count]]


def oracle_seg_maps(labels: np.ndarray, flip_prob: float = 0.0, blur_sigma: float = 0.0,
                    seed: int = 0) -> SegMaps:
    """Exact classifier outputs from a label map, optionally blurred and pixel-flipped."""
    if flip_prob < 0 or blur_sigma < 0:
        raise ValueError("corruption parameters must be >= 0")
    t = make_targets(labels)
    maps = [m.astype(np.float32) for m in (t.background, t.boundaries, t.center)]
    if blur_sigma > 0:
        maps = [ndimage.gaussian_filter(m, blur_sigma) for m in maps]
    if flip_prob > 0:
        rng = np.random.default_rng(seed)
        maps = [np.where(rng.uniform(size=m.shape) < flip_prob, 1 - m, m) for m in maps]
    return SegMaps(*maps)


class OracleClassifier:
    """Pixel classifier that reads the answer off a known label map."""

    def __init__(self, labels: np.ndarray, flip_prob: float = 0.0, blur_sigma: float = 0.0,
                 seed: int = 0):
        self.labels = labels
        self.flip_prob, self.blur_sigma, self.seed = flip_prob, blur_sigma, seed

    def __call__(self, image: np.ndarray) -> SegMaps:
        return oracle_seg_maps(self.labels, self.flip_prob, self.blur_sigma, self.seed)


class OracleNextRing:
    """Next-ring logit source that reads the ground truth on the polar grid."""

    def __init__(self, labels: np.ndarray, confidence: float = 10.0):
        self.labels = labels
        self.confidence = confidence

    def __call__(self, patch: np.ndarray, grid, ring_index: int) -> np.ndarray:
        a = sample_grid(self.labels, grid, mode="nearest")
        inside = (a >= 1) & (a <= ring_index + 1)
        score = np.where(inside, self.confidence, -self.confidence).astype(np.float32)
        return np.stack([-score, score])
