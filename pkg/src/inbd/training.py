"""Training loops for the pixel classifier and the next-ring network."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import AllUndefined, NoBoundaryAhead, NonFiniteGradient
from .inference import InferenceConfig, extract_next_boundary
from .model import (INBDNet, SegNet, total_loss, wrd_beta, wrd_target_row)
from .polar import (DEFAULT_ALPHA, DEFAULT_N_RADIAL, M_MIN, RingBoundary, assemble_patch,
                    boundary_from_labels, build_polar_grid, center_of_mass,
                    circular_interpolate, compute_angular_resolution, estimate_radial_extent,
                    sample_grid)
from .segmentation import SegMaps, downscale, make_targets, quarter_targets, segmentation_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    n_iterations: int = 3
    gamma0: float = 4.0
    gamma1: float = 4.0
    color_jitter: float = 0.2
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    n_radial: int = DEFAULT_N_RADIAL
    m_min: int = M_MIN
    widths: tuple[int, ...] = (16, 32, 64)
    wrd_channels: int = 8
    checkpoint_every: int = 10

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.gamma0 < 0 or self.gamma1 < 0:
            raise ValueError("augmentation amplitudes must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def inference_config(self, **kw) -> InferenceConfig:
        return InferenceConfig(alpha=self.alpha, n_radial=self.n_radial, m_min=self.m_min, **kw)


def augment_boundary(radii: np.ndarray, gamma0: float, gamma1: float,
                     rng: np.random.Generator | None = None, x0: float | None = None,
                     x1: float | None = None) -> np.ndarray:
    """Perturb boundary radii by a phase-shifted cosine plus one shared offset."""
    radii = np.asarray(radii, dtype=np.float64)
    if x0 is None or x1 is None:
        d0, d1 = rng.uniform(-1.0, 1.0, 2)
        x0 = d0 if x0 is None else x0
        x1 = d1 if x1 is None else x1
    phi = 2 * np.pi * np.arange(radii.size) / radii.size
    out = radii + np.cos(phi + x0) * gamma0 + x1 * gamma1
    return np.maximum(out, 1.0)


def cosine_lr(base_lr: float, t: float, total: float) -> float:
    return base_lr * 0.5 * (1 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay over named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], weight_decay=1e-2,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state = {n: (torch.zeros_like(p), torch.zeros_like(p)) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        for name, p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient(name)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            m, v = self.state[name]
            p.mul_(1 - lr * self.weight_decay)
            m.mul_(b1).add_(p.grad, alpha=1 - b1)
            v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + self.eps))


def finite_diff_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                      epsilon: float = 1e-4, floor: float = 1e-8) -> float:
    """Max relative error between autograd and central differences over all scalars.

    Magnitudes below ``floor`` are compared absolutely, so components that are
    exactly zero do not turn rounding noise into a large relative error.
    """
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + epsilon
                up = loss_fn().item()
                flat[k] = orig - epsilon
                down = loss_fn().item()
                flat[k] = orig
                fd = (up - down) / (2 * epsilon)
                a = gflat[k].item()
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


# --- data -----------------------------------------------------------------------------

@dataclass
class TrainImage:
    image: np.ndarray
    labels: np.ndarray
    seg: SegMaps | None = None

    @property
    def n_rings(self) -> int:
        return int(self.labels.max())

    @property
    def origin(self) -> tuple[float, float]:
        return center_of_mass(self.labels == 1)


def ring_items(images: Sequence[TrainImage]) -> list[tuple[int, int]]:
    """Every (image, ring) pair whose next ring exists in the annotation."""
    return [(k, i) for k, im in enumerate(images) for i in range(1, im.n_rings)]


def color_jitter(image: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    if amount == 0:
        return image
    brightness, contrast = rng.uniform(1 - amount, 1 + amount, 2)
    mean = image.mean()
    return np.clip((image - mean) * contrast + mean * brightness, 0, 1).astype(np.float32)


def _to_tensor(patch: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(patch[None], dtype=torch.float32)


def train_inbd_epoch(images: Sequence[TrainImage], net: INBDNet, optimizer: AdamW,
                     config: TrainConfig, lr: float, rng: np.random.Generator) -> float:
    """One pass over every (image, ring) seed, iterating the prediction ``n`` times each."""
    net.train()
    items = ring_items(images)
    order = rng.permutation(len(items))
    n = config.n_iterations
    losses = []
    for j in order:
        k, i = items[j]
        im = images[k]
        origin = im.origin
        image = color_jitter(im.image, config.color_jitter, rng)
        ref = boundary_from_labels(im.labels, origin, i, 360)
        rho = ref.resample(compute_angular_resolution(ref, config.alpha, config.m_min)).radii
        loss = None
        for _ in range(n):
            if i + 1 > im.n_rings:
                break
            prev = RingBoundary(augment_boundary(rho, config.gamma0, config.gamma1, rng), origin, i)
            m = compute_angular_resolution(prev, config.alpha, config.m_min)
            prev = prev.resample(m)
            try:
                extent = estimate_radial_extent(im.seg.boundaries, origin, prev)
            except NoBoundaryAhead:
                break
            grid = build_polar_grid(origin, prev, extent, config.n_radial, m)
            patch = assemble_patch(image, im.seg.background, im.seg.boundaries, grid)
            annotation = sample_grid(im.labels, grid, mode="nearest")
            row = wrd_target_row(annotation, i)
            logits, sig = net(_to_tensor(patch), wrd_beta(row, i))
            step_loss = total_loss(logits, annotation, sig.omega_raw, i, wrd_row=row)
            loss = step_loss if loss is None else loss + step_loss
            radii, _ = extract_next_boundary(logits[0].detach().numpy(), grid)
            try:
                radii = circular_interpolate(radii)
            except AllUndefined:
                radii = prev.radii + 1.0
            rho = np.maximum(radii, prev.radii)
            i += 1
        if loss is None:
            continue
        optimizer.zero_grad()
        (loss / n).backward()
        optimizer.step(lr)
        losses.append(loss.item() / n)
    return float(np.mean(losses)) if losses else float("nan")


def train_seg_epoch(images: Sequence[TrainImage], net: SegNet, optimizer: AdamW,
                    config: TrainConfig, lr: float, rng: np.random.Generator) -> float:
    net.train()
    losses = []
    for k in rng.permutation(len(images)):
        im = images[k]
        x = downscale(color_jitter(im.image, config.color_jitter, rng))
        t = quarter_targets(make_targets(im.labels))
        logits = net(torch.as_tensor(x.transpose(2, 0, 1)[None], dtype=torch.float32))
        loss = segmentation_loss(logits[0], torch.as_tensor(t))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(lr)
        losses.append(loss.item())
    return float(np.mean(losses))


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def fit(kind: str, images: Sequence[TrainImage], config: TrainConfig,
        on_epoch: Callable[[int, float, float, torch.nn.Module], None] | None = None):
    """Train a fresh network of ``kind`` ('seg' or 'inbd'); returns (net, epoch losses)."""
    rng = seed_everything(config.seed)
    if kind == "seg":
        net, epoch_fn = SegNet(config.widths), train_seg_epoch
    elif kind == "inbd":
        if any(im.seg is None for im in images):
            raise ValueError("training the next-ring network needs seg maps for every image")
        net, epoch_fn = INBDNet(config.widths, config.wrd_channels), train_inbd_epoch
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    opt = AdamW(net.named_parameters(), weight_decay=config.weight_decay)
    history = []
    for epoch in range(config.epochs):
        lr = cosine_lr(config.base_lr, epoch, config.epochs)
        loss = epoch_fn(images, net, opt, config, lr, rng)
        history.append(loss)
        log.info("%s epoch %d/%d loss %.5f lr %.2e", kind, epoch + 1, config.epochs, loss, lr)
        if on_epoch is not None:
            on_epoch(epoch, loss, lr, net)
    net.eval()
    return net, history
