"""Pixel classifier contract, its targets and its training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ShapeMismatch, TooSmall

# weights of the background CE, boundary Dice and center CE terms
LOSS_WEIGHTS = (0.01, 1.0, 0.1)
DICE_EPS = 1e-6
DOWNSCALE = 0.25


@dataclass
class SegMaps:
    """Per-pixel probabilities for background, ring boundaries and the center ring."""

    background: np.ndarray
    boundaries: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        if not (self.background.shape == self.boundaries.shape == self.center.shape):
            raise ShapeMismatch("seg maps must share one shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.background.shape


@dataclass
class SegTargets:
    background: np.ndarray
    boundaries: np.ndarray
    center: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.background, self.boundaries, self.center]).astype(np.float32)


class PixelClassifier(Protocol):
    def __call__(self, image: np.ndarray) -> SegMaps: ...


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with an 8-neighbour of a different label, dilated by one pixel."""
    labels = np.asarray(labels)
    hi = ndimage.maximum_filter(labels, size=3, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=3, mode="nearest")
    edge = hi != lo
    return ndimage.binary_dilation(edge, structure=np.ones((3, 3), bool))


def make_targets(labels: np.ndarray) -> SegTargets:
    labels = np.asarray(labels)
    return SegTargets(background=labels == 0, boundaries=boundary_mask(labels), center=labels == 1)


def downscale(image: np.ndarray, factor: float = DOWNSCALE) -> np.ndarray:
    """Box-filter downsampling by 4; partial edge blocks average what they cover."""
    if factor != DOWNSCALE:
        raise ValueError("only a factor of 0.25 is supported")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise TooSmall(f"image of {h}x{w} is too small to downscale")
    k = int(round(1 / factor))
    rows, cols = np.arange(0, h, k), np.arange(0, w, k)
    sums = np.add.reduceat(np.add.reduceat(image, rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    if image.ndim == 3:
        counts = counts[..., None]
    return sums / counts


def block_max(mask: np.ndarray, k: int = 4) -> np.ndarray:
    """Blockwise ``any`` for binary masks, same block layout as :func:`downscale`."""
    h, w = mask.shape
    m = np.asarray(mask, dtype=np.uint8)
    return np.maximum.reduceat(np.maximum.reduceat(m, np.arange(0, h, k), axis=0),
                               np.arange(0, w, k), axis=1).astype(bool)


def upscale(maps: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling of (C, h, w) maps back to full resolution (C, H, W)."""
    t = torch.as_tensor(np.ascontiguousarray(maps), dtype=torch.float32)[None]
    h, w = maps.shape[-2:]
    k = int(round(1 / DOWNSCALE))
    big = F.interpolate(t, size=(h * k, w * k), mode="bilinear", align_corners=False)
    return big[0, :, : shape[0], : shape[1]].numpy()


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def dice_loss(pred, target, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - 2 sum(p t) / (sum p^2 + sum t^2 + eps)``."""
    p, t = _as_tensor(pred), _as_tensor(target).to(_as_tensor(pred).dtype)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{tuple(p.shape)} vs {tuple(t.shape)}")
    return 1 - 2 * (p * t).sum() / ((p * p).sum() + (t * t).sum() + eps)


def bce_with_logits(logits, target) -> torch.Tensor:
    z, t = _as_tensor(logits), _as_tensor(target)
    if z.shape != t.shape:
        raise ShapeMismatch(f"{tuple(z.shape)} vs {tuple(t.shape)}")
    return F.binary_cross_entropy_with_logits(z, t.to(z.dtype))


def segmentation_loss(logits, targets, weights=LOSS_WEIGHTS) -> torch.Tensor:
    """Weighted background CE + boundary Dice + center CE.

    ``logits`` is a (3, H, W) (or batched (B, 3, H, W)) array of raw scores for
    background, boundaries and center; ``targets`` matches it or is a
    :class:`SegTargets`.
    """
    z = _as_tensor(logits)
    t = _as_tensor(targets.as_array() if isinstance(targets, SegTargets) else targets)
    if z.shape != t.shape:
        raise ShapeMismatch(f"{tuple(z.shape)} vs {tuple(t.shape)}")
    c = z.shape[-3]
    if c != 3:
        raise ShapeMismatch("expected 3 channels (background, boundaries, center)")
    bg = bce_with_logits(z[..., 0, :, :], t[..., 0, :, :])
    bd = dice_loss(torch.sigmoid(z[..., 1, :, :]), t[..., 1, :, :])
    ct = bce_with_logits(z[..., 2, :, :], t[..., 2, :, :])
    return weights[0] * bg + weights[1] * bd + weights[2] * ct


class NetClassifier:
    """Adapts a trained segmentation network to the :class:`PixelClassifier` contract.

    The network sees the image at a quarter of its resolution; the outputs are
    upsampled back to full size.
    """

    def __init__(self, net: torch.nn.Module):
        self.net = net.eval()

    def __call__(self, image: np.ndarray) -> SegMaps:
        small = downscale(image)
        x = torch.as_tensor(small.transpose(2, 0, 1)[None], dtype=torch.float32)
        with torch.no_grad():
            probs = torch.sigmoid(self.net(x))[0].numpy()
        full = upscale(probs, image.shape[:2])
        return SegMaps(full[0], full[1], full[2])


def quarter_targets(targets: SegTargets) -> np.ndarray:
    """Targets at the classifier's working resolution, (3, h, w)."""
    bg = downscale(targets.background)
    ct = downscale(targets.center)
    bd = block_max(targets.boundaries)
    return np.stack([bg, bd, ct]).astype(np.float32)

