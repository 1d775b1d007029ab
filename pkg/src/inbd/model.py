"""Next-ring network with circular convolutions and wedging ring detection.

Tensors are laid out ``(batch, channels, radial N, angular M)``; only the
angular axis wraps around.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadKernel, ShapeMismatch

WRD_BETA = 15.0
WRD_LOSS_WEIGHT = 0.01
NORM_EPS = 1e-5
# classifier channel 1 = inside the next ring boundary, channel 0 = beyond it
NEXT_RING = 1

PARAMS_MAGIC = b"INBD"
PARAMS_VERSION = 1


def circular_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                    stride=1) -> torch.Tensor:
    """Cross-correlation, wrap-padded along the angular (last) axis, zero-padded radially."""
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise BadKernel(f"kernel {kh}x{kw} must have odd sizes")
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    pw, ph = kw // 2, kh // 2
    if pw:
        if pw > x.shape[-1]:
            raise BadKernel("kernel wider than the angular axis")
        x = F.pad(x, (pw, pw, 0, 0), mode="circular")
    if ph:
        x = F.pad(x, (0, 0, ph, ph))
    out = F.conv2d(x, weight, bias, stride=stride)
    return out[0] if squeeze else out


class CircularConv2d(nn.Conv2d):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, bias=False):
        if kernel_size % 2 == 0:
            raise BadKernel("kernel_size must be odd")
        super().__init__(in_channels, out_channels, kernel_size, padding=0, bias=bias)

    def forward(self, x):
        return circular_conv2d(x, self.weight, self.bias, self.stride)


def _conv3x3(cin, cout, circular):
    if circular:
        return CircularConv2d(cin, cout, 3)
    return nn.Conv2d(cin, cout, 3, padding=1, bias=False)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, circular=True):
        super().__init__(_conv3x3(cin, cout, circular),
                         nn.InstanceNorm2d(cout, eps=NORM_EPS, affine=True), nn.ReLU())


class UpBlock(nn.Module):
    """Upsample x2, concatenate skip, 1x1 conv, 3x3 conv, instance norm, ReLU."""

    def __init__(self, cin, cskip, cout, circular=True):
        super().__init__()
        self.reduce = nn.Conv2d(cin + cskip, cout, 1, bias=False)
        self.conv = _conv3x3(cout, cout, circular)
        self.norm = nn.InstanceNorm2d(cout, eps=NORM_EPS, affine=True)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        x = self.reduce(torch.cat([x, skip], dim=1))
        return F.relu(self.norm(self.conv(x)))


class Backbone(nn.Module):
    """Small U-Net: one conv block per encoder stage, 2x2 max pooling between stages."""

    def __init__(self, in_channels: int, widths: Sequence[int], circular: bool):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.widths = widths
        self.encoder = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.encoder.append(ConvBlock(cin, w, circular))
            cin = w
        self.decoder = nn.ModuleList(
            UpBlock(widths[k + 1], widths[k], widths[k], circular)
            for k in reversed(range(len(widths) - 1)))

    @property
    def out_channels(self) -> int:
        return self.widths[0]

    def forward(self, x):
        skips = []
        for k, stage in enumerate(self.encoder):
            if k:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = stage(x)
            skips.append(x)
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            x = block(x, skip)
        return x


@dataclass
class WRDSignal:
    omega_plus: torch.Tensor   # (B, M) pre-sigmoid start detector
    omega_minus: torch.Tensor  # (B, M) pre-sigmoid end detector
    omega_raw: torch.Tensor    # (B, M) accumulated signal before normalization
    omega: torch.Tensor        # (B, M) normalized so that its maximum is 0
    beta: torch.Tensor


def wrd_recurrence(omega_plus: torch.Tensor, omega_minus: torch.Tensor, beta=0.0):
    """Accumulate start/end detections along the angle.

    ``raw[0] = beta``, ``raw[k] = raw[k-1] + sigmoid(plus[k-1]) - sigmoid(minus[k-1])``
    and the normalized signal is ``raw - max(raw)``.
    """
    step = torch.sigmoid(omega_plus) - torch.sigmoid(omega_minus)
    beta = torch.as_tensor(beta, dtype=step.dtype)
    if beta.dim() == 1:
        beta = beta[:, None]
    csum = torch.cumsum(step, dim=-1)
    raw = beta + torch.cat([torch.zeros_like(csum[..., :1]), csum[..., :-1]], dim=-1)
    omega = raw - raw.max(dim=-1, keepdim=True).values
    return raw, omega


class WRDHead(nn.Module):
    """MaxPool(2,1) -> 1x1 conv -> norm -> ReLU, twice, then a 1x1 conv to 2 channels."""

    def __init__(self, in_channels: int, width: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.norm1 = nn.InstanceNorm2d(width, eps=NORM_EPS, affine=True)
        self.conv2 = nn.Conv2d(width, width, 1, bias=False)
        self.norm2 = nn.InstanceNorm2d(width, eps=NORM_EPS, affine=True)
        self.out = nn.Conv2d(width, 2, 1)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(F.max_pool2d(x, (2, 1), ceil_mode=True))))
        x = F.relu(self.norm2(self.conv2(F.max_pool2d(x, (2, 1), ceil_mode=True))))
        return self.out(x)


def wrd_signal(features: torch.Tensor, head: WRDHead, beta=0.0) -> WRDSignal:
    y = head(features).mean(dim=-2)  # radial average -> (B, 2, M)
    plus, minus = y[:, 0], y[:, 1]
    raw, omega = wrd_recurrence(plus, minus, beta)
    return WRDSignal(plus, minus, raw, omega, torch.as_tensor(beta))


class INBDNet(nn.Module):
    """Classifies polar grid cells as inside the next ring boundary or beyond it.

    Input is the 7-channel patch (the last, omega, channel is ignored and
    recomputed) or just its first 6 channels.
    """

    in_channels = 6

    def __init__(self, widths: Sequence[int] = (16, 32, 64), wrd_channels: int = 8):
        super().__init__()
        self.backbone = Backbone(self.in_channels, widths, circular=True)
        self.wrd = WRDHead(self.backbone.out_channels, wrd_channels)
        self.classifier = nn.Conv2d(self.backbone.out_channels + 1, 2, 1)

    def forward(self, patch: torch.Tensor, beta=0.0) -> tuple[torch.Tensor, WRDSignal]:
        if patch.dim() != 4 or patch.shape[1] not in (6, 7):
            raise ShapeMismatch(f"expected (B, 6|7, N, M) input, got {tuple(patch.shape)}")
        x = patch[:, : self.in_channels]
        feats = self.backbone(x)
        sig = wrd_signal(feats, self.wrd, beta)
        omega = sig.omega[:, None, None, :].expand(-1, 1, feats.shape[-2], -1)
        return self.classifier(torch.cat([feats, omega], dim=1)), sig


class SegNet(nn.Module):
    """Reference pixel classifier: RGB in, (background, boundaries, center) logits out."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.backbone = Backbone(3, widths, circular=False)
        self.head = nn.Conv2d(self.backbone.out_channels, 3, 1)

    def forward(self, x):
        return self.head(self.backbone(x))


def next_ring_target(annotation_patch, ring_index: int) -> torch.Tensor:
    """Cells inside the outer boundary of ring ``ring_index + 1``."""
    a = torch.as_tensor(np.asarray(annotation_patch))
    return ((a >= 1) & (a <= ring_index + 1)).long()


def wrd_target_row(annotation_patch: np.ndarray, ring_index: int) -> np.ndarray:
    """Per angle, the first label met outward that does not belong to rings ``1..i``.

    This is the label just beyond the current ring, independent of where the
    grid's first row falls relative to the true boundary.
    """
    a = np.asarray(annotation_patch)
    beyond = (a == 0) | (a > ring_index)
    first = np.argmax(beyond, axis=0)
    row = a[first, np.arange(a.shape[1])].copy()
    row[~beyond.any(axis=0)] = 0
    return row


def wrd_beta(annotation_row, ring_index: int) -> float:
    return WRD_BETA if int(np.asarray(annotation_row)[0]) == ring_index + 1 else -WRD_BETA


def wrd_loss(omega_raw, annotation_row, ring_index: int) -> torch.Tensor:
    """Binary CE of ``sigmoid(omega_raw)`` against ``annotation_row == i + 1``."""
    z = omega_raw if isinstance(omega_raw, torch.Tensor) else torch.as_tensor(omega_raw)
    t = torch.as_tensor(np.asarray(annotation_row) == ring_index + 1, dtype=z.dtype)
    if z.shape[-1] != t.shape[-1]:
        raise ShapeMismatch("omega and annotation row lengths differ")
    return F.binary_cross_entropy_with_logits(z, t.expand_as(z))


def total_loss(logits: torch.Tensor, annotation_patch, omega_raw: torch.Tensor,
               ring_index: int, wrd_row=None) -> torch.Tensor:
    """Cell-wise CE for the next ring plus the weighted WRD loss."""
    if logits.dim() == 3:
        logits = logits[None]
    target = next_ring_target(annotation_patch, ring_index)
    if target.dim() == 2:
        target = target[None]
    if logits.shape[-2:] != target.shape[-2:]:
        raise ShapeMismatch("logits and annotation patch differ in shape")
    if wrd_row is None:
        wrd_row = wrd_target_row(np.asarray(annotation_patch).reshape(target.shape[-2:]), ring_index)
    cls = F.cross_entropy(logits, target)
    return cls + WRD_LOSS_WEIGHT * wrd_loss(omega_raw, wrd_row, ring_index)


class NetNextRing:
    """Adapts a trained :class:`INBDNet` to the inference engine's logit source."""

    def __init__(self, net: INBDNet):
        self.net = net.eval()

    def __call__(self, patch: np.ndarray, grid, ring_index: int) -> np.ndarray:
        with torch.no_grad():
            logits, _ = self.net(torch.as_tensor(patch, dtype=torch.float32)[None], 0.0)
        return logits[0].numpy()


# --- parameter container --------------------------------------------------------------

def save_params(module: nn.Module | dict, path) -> None:
    """Write named tensors: magic, u32 version, then (name, shape, f32 data) records."""
    state = module.state_dict() if isinstance(module, nn.Module) else module
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC + struct.pack("<I", PARAMS_VERSION))
        for name, value in state.items():
            arr = np.ascontiguousarray(
                value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value,
                dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not an INBD parameter file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4: pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).copy()
        pos += 4 * count
    return out


def _widths_from_state(state, prefix="backbone.encoder") -> tuple[int, ...]:
    widths, k = [], 0
    while f"{prefix}.{k}.0.weight" in state:
        widths.append(int(state[f"{prefix}.{k}.0.weight"].shape[0]))
        k += 1
    return tuple(widths)


def model_from_params(path) -> nn.Module:
    """Rebuild an :class:`INBDNet` or :class:`SegNet` from a saved parameter file."""
    state = load_params(path)
    widths = _widths_from_state(state)
    if "wrd.out.weight" in state:
        net = INBDNet(widths, wrd_channels=int(state["wrd.conv1.weight"].shape[0]))
    else:
        net = SegNet(widths)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    return net
