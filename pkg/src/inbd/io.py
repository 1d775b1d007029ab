"""Reading and writing images, label maps, ring files, seg maps and JSON reports."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .polar import RingBoundary
from .segmentation import SegMaps, boundary_mask

SEG_SUFFIXES = (".bg.png", ".bd.png", ".ct.png")
DERIVED_SUFFIXES = (".labels.png", ".overlay.png") + SEG_SUFFIXES


def load_image(path) -> np.ndarray:
    """RGB float32 image in [0, 1]; grayscale and RGBA inputs are converted."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return np.repeat(arr[..., None], 3, axis=2).astype(np.float32)
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def rings_to_dict(boundaries: Sequence[RingBoundary], origin=None) -> dict:
    if origin is None:
        origin = boundaries[0].origin if boundaries else (0.0, 0.0)
    return {"origin": [float(origin[0]), float(origin[1])],
            "rings": [{"index": int(b.ring_index), "radii": [float(r) for r in b.radii],
                       "angles_count": int(b.n_angles)} for b in boundaries]}


def rings_from_dict(data: dict) -> list[RingBoundary]:
    origin = tuple(float(v) for v in data["origin"])
    out = []
    for ring in data["rings"]:
        radii = np.asarray(ring["radii"], dtype=np.float64)
        if radii.size != ring["angles_count"]:
            raise ValueError(f"ring {ring['index']}: angles_count does not match radii")
        out.append(RingBoundary(radii, origin, int(ring["index"])))
    return out


def write_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_rings(boundaries: Sequence[RingBoundary], path, origin=None) -> None:
    write_json(rings_to_dict(boundaries, origin), path)


def load_rings(path) -> list[RingBoundary]:
    return rings_from_dict(read_json(path))


def save_seg_maps(seg: SegMaps, directory, stem: str) -> list[Path]:
    paths = []
    for suffix, m in zip(SEG_SUFFIXES, (seg.background, seg.boundaries, seg.center)):
        p = Path(directory) / f"{stem}{suffix}"
        Image.fromarray(np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths


def load_seg_maps(directory, stem: str) -> SegMaps | None:
    paths = [Path(directory) / f"{stem}{s}" for s in SEG_SUFFIXES]
    if not all(p.exists() for p in paths):
        return None
    maps = []
    for p in paths:
        with Image.open(p) as im:
            maps.append(np.asarray(im, dtype=np.float32) / 255.0)
    return SegMaps(*maps)


def ring_colors(n: int) -> np.ndarray:
    """Distinct colors for rings 1..n, cycling the hue by the golden ratio."""
    hues = (np.arange(n) * 0.618034) % 1.0
    rgb = np.stack([np.abs(hues * 6 - 3) - 1, 2 - np.abs(hues * 6 - 2),
                    2 - np.abs(hues * 6 - 4)], axis=1)
    return np.clip(rgb, 0, 1)


def save_overlay(image: np.ndarray, labels: np.ndarray, path, alpha: float = 0.35) -> None:
    """RGBA picture of the image with every ring tinted and its boundary drawn."""
    n = int(labels.max())
    lut = np.vstack([np.zeros((1, 3)), ring_colors(n)])
    tint = lut[labels]
    fg = (labels > 0)[..., None]
    out = np.where(fg, (1 - alpha) * image + alpha * tint, image)
    edge = boundary_mask(labels) & (labels > 0)
    out[edge] = tint[edge]
    rgba = np.concatenate([out, np.ones(labels.shape + (1,))], axis=2)
    Image.fromarray(np.clip(np.rint(rgba * 255), 0, 255).astype(np.uint8)).save(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def is_source_image(path: Path) -> bool:
    """A ``.png`` that is not one of the files this package derives from images."""
    name = path.name
    return name.endswith(".png") and not name.endswith(DERIVED_SUFFIXES)


def stem_of(path: Path) -> str:
    name = Path(path).name
    for suffix in DERIVED_SUFFIXES + (".rings.json", ".png"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem
