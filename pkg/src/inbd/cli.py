"""Command line entry point: ``inbd synth-gen | train | infer | evaluate``.

Exit codes: 0 ok, 1 some images failed, 2 configuration error, 3 I/O error,
4 malformed or mismatched data.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import describe, load_config
from .errors import ConfigInvalid, INBDError, ShapeMismatch
from .inference import InferenceConfig, detect_rings
from .io import (is_source_image, load_image, load_labels, save_image, save_labels,
                 save_overlay, save_rings, sha256_file, stem_of, write_json)
from .metrics import evaluation_report
from .model import INBDNet, NetNextRing, SegNet, model_from_params, save_params
from .segmentation import NetClassifier
from .synthetic import OracleNextRing, SynthConfig, generate_dataset, oracle_seg_maps
from .training import TrainConfig, TrainImage, fit

log = logging.getLogger("inbd")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 1, 2, 3, 4

TRAIN_NOTES = {
    "epochs": "passes over the data",
    "base_lr": "peak learning rate of the cosine schedule",
    "n_iterations": "chained predictions per training seed",
    "gamma0": "amplitude (px) of the cosine boundary perturbation",
    "gamma1": "amplitude (px) of the constant boundary offset",
    "color_jitter": "brightness/contrast factors drawn from 1 +- this",
    "alpha": "angular samples per pixel of ring radius",
    "n_radial": "radial samples of the polar grid",
    "m_min": "smallest number of angular samples",
    "widths": "channel widths of the encoder stages",
    "checkpoint_every": "epochs between checkpoints",
}
SYNTH_NOTES = {
    "n_rings_max": "if set, ring count drawn from n_rings..n_rings_max",
    "mean_ring_width": "none: fill about 85% of the image radius",
    "wedge_arc": "range (rad) of the zero-width arc of a wedging ring",
    "disconnected_prob": "chance a wedging ring gets a second gap",
}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _manifest(path: Path, command: str, config, inputs, outputs, seed, started, **extra):
    data = {
        "command": command,
        "config": config,
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "version": __version__,
        **extra,
    }
    write_json(data, path)


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _load(path, cls):
    try:
        return load_config(path, cls) if path else cls()
    except ConfigInvalid as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot write to {path}: {exc.strerror or exc}") from None
    return path


# --- synth-gen -----------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    started = time.perf_counter()
    cfg = _load(args.config, SynthConfig)
    if args.count < 0:
        raise CLIError(EXIT_CONFIG, "count must be >= 0")
    out = _ensure_dir(Path(args.out))
    outputs, samples = [], []
    try:
        for k, s in enumerate(generate_dataset(cfg, args.count)):
            stem = f"synth_{k:04d}"
            files = [out / f"{stem}.png", out / f"{stem}.labels.png", out / f"{stem}.rings.json"]
            save_image(s.image, files[0])
            save_labels(s.labels, files[1])
            save_rings(s.boundaries, files[2], s.origin)
            outputs += files
            samples.append({"stem": stem, "n_rings": s.n_rings})
        _manifest(out / "manifest.json", "synth-gen", cfg.to_dict(),
                  [args.config] if args.config else [], outputs, cfg.seed, started,
                  samples=samples)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"writing samples failed: {exc}") from None
    log.info("wrote %d samples to %s", args.count, out)
    return EXIT_OK


# --- train ---------------------------------------------------------------------------

def _read_image(path: Path) -> np.ndarray:
    try:
        return load_image(path)
    except (OSError, ValueError) as exc:
        raise CLIError(EXIT_DATA, f"cannot read image {path}: {exc}") from None


def _load_dataset(directory: Path) -> tuple[list[TrainImage], list[Path]]:
    if not directory.is_dir():
        raise CLIError(EXIT_IO, f"dataset directory {directory} does not exist")
    images = sorted(p for p in directory.iterdir() if is_source_image(p))
    if not images:
        raise CLIError(EXIT_DATA, f"no images in {directory}")
    items, files = [], []
    for p in images:
        lab_path = p.with_name(f"{stem_of(p)}.labels.png")
        if not lab_path.exists():
            raise CLIError(EXIT_DATA, f"{p.name}: missing annotation {lab_path.name}")
        image = _read_image(p)
        try:
            labels = load_labels(lab_path)
        except (OSError, ValueError) as exc:
            raise CLIError(EXIT_DATA, f"cannot read {lab_path}: {exc}") from None
        if labels.shape != image.shape[:2]:
            raise CLIError(EXIT_DATA, f"{p.name}: annotation size differs from the image")
        if not np.any(labels == 1):
            raise CLIError(EXIT_DATA, f"{lab_path.name}: no center ring (label 1)")
        items.append(TrainImage(image, labels))
        files += [p, lab_path]
    return items, files


def _load_net(path, kind):
    try:
        net = model_from_params(path)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read model {path}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, RuntimeError) as exc:
        raise CLIError(EXIT_CONFIG, f"{path} is not a valid parameter file: {exc}") from None
    if not isinstance(net, kind):
        raise CLIError(EXIT_CONFIG, f"{path} holds a {type(net).__name__}, not a {kind.__name__}")
    return net


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _load(args.config, TrainConfig)
    if args.kind == "inbd" and not args.seg:
        raise CLIError(EXIT_CONFIG, "training inbd needs --seg <model|oracle>")
    images, inputs = _load_dataset(Path(args.data))
    if args.kind == "inbd":
        if args.seg == "oracle":
            for im in images:
                im.seg = oracle_seg_maps(im.labels)
        else:
            clf = NetClassifier(_load_net(args.seg, SegNet))
            inputs.append(Path(args.seg))
            for im in images:
                im.seg = clf(im.image)
    out = Path(args.out)
    _ensure_dir(out.parent)
    csv_path = out.with_name(f"{out.stem}.loss.csv")
    checkpoints = []

    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "lr"])

            def on_epoch(epoch, loss, lr, net):
                writer.writerow([epoch + 1, repr(loss), repr(lr)])
                fh.flush()
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    p = out.with_name(f"{out.stem}.epoch{epoch + 1:04d}{out.suffix}")
                    save_params(net, p)
                    checkpoints.append(p)

            net, history = fit(args.kind, images, cfg, on_epoch)
        save_params(net, out)
        _manifest(out.with_name(f"{out.stem}.manifest.json"), f"train {args.kind}",
                  _config_dict(cfg), ([Path(args.config)] if args.config else []) + inputs,
                  [out, csv_path, *checkpoints], cfg.seed, started,
                  seg_source=args.seg, final_loss=history[-1])
    except OSError as exc:
        raise CLIError(EXIT_IO, f"writing training outputs failed: {exc}") from None
    log.info("saved %s (final loss %.5f)", out, history[-1])
    return EXIT_OK


# --- infer ---------------------------------------------------------------------------

def _labels_beside(image_path: Path) -> np.ndarray:
    p = image_path.with_name(f"{stem_of(image_path)}.labels.png")
    if not p.exists():
        raise CLIError(EXIT_DATA, f"oracle source needs {p.name}")
    return load_labels(p)


def _infer_one(path: Path, args, seg_net, g_net, config: InferenceConfig, out: Path) -> dict:
    stem = stem_of(path)
    image = _read_image(path)
    labels = None
    if args.seg == "oracle" or args.model == "oracle":
        labels = _labels_beside(path)
    seg = oracle_seg_maps(labels) if seg_net is None else NetClassifier(seg_net)(image)
    model = OracleNextRing(labels) if g_net is None else NetNextRing(g_net)
    result = detect_rings(image, None, model, config, seg=seg)
    files = [out / f"{stem}.rings.json", out / f"{stem}.labels.png"]
    save_rings(result.boundaries, files[0], result.origin)
    save_labels(result.label_map, files[1])
    if args.overlay:
        files.append(out / f"{stem}.overlay.png")
        save_overlay(image, result.label_map, files[2])
    return {"stem": stem, "rings": len(result.boundaries), "iterations": result.iterations,
            "stop_reason": result.stop_reason.value, "low_confidence": result.low_confidence,
            "outputs": [str(f) for f in files]}


def cmd_infer(args) -> int:
    started = time.perf_counter()
    src = Path(args.input)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if is_source_image(p))
        if not paths:
            raise CLIError(EXIT_DATA, f"no images in {src}")
    elif src.exists():
        paths = [src]
    else:
        raise CLIError(EXIT_IO, f"{src} does not exist")
    if args.alpha <= 0 or args.max_iters < 1 or args.n_radial < 2 or args.jobs < 1:
        raise CLIError(EXIT_CONFIG, "alpha > 0, max-iters >= 1, n-radial >= 2, jobs >= 1")
    seg_net = None if args.seg == "oracle" else _load_net(args.seg, SegNet)
    g_net = None if args.model == "oracle" else _load_net(args.model, INBDNet)
    config = InferenceConfig(alpha=args.alpha, n_radial=args.n_radial, m_min=args.m_min,
                             max_iters=args.max_iters)
    out = _ensure_dir(Path(args.out))

    def run(path):
        try:
            return _infer_one(path, args, seg_net, g_net, config, out)
        except CLIError as exc:
            return {"stem": stem_of(path), "error": str(exc), "code": exc.code}
        except (INBDError, ValueError, OSError) as exc:
            return {"stem": stem_of(path), "error": f"{type(exc).__name__}: {exc}",
                    "code": EXIT_DATA}

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(run, paths))
    failed = [r for r in results if "error" in r]
    for r in failed:
        log.error("%s: %s", r["stem"], r["error"])
    inputs = list(paths) + [Path(p) for p in (args.seg, args.model) if p != "oracle"]
    outputs = [f for r in results for f in r.get("outputs", [])]
    _manifest(out / "manifest.json", "infer", _config_dict(config), inputs, outputs, None,
              started, seg_source=args.seg, model=args.model,
              images=[{k: v for k, v in r.items() if k != "outputs"} for r in results])
    if failed:
        if len(paths) == 1:
            raise CLIError(failed[0].get("code", EXIT_DATA), failed[0]["error"])
        return EXIT_PARTIAL
    return EXIT_OK


# --- evaluate ------------------------------------------------------------------------

def _label_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise CLIError(EXIT_IO, f"{directory} is not a directory")
    return {stem_of(p): p for p in sorted(directory.glob("*.labels.png"))}


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    pred, gt = _label_files(Path(args.pred)), _label_files(Path(args.gt))
    if not gt:
        raise CLIError(EXIT_DATA, f"no *.labels.png in {args.gt}")
    missing = sorted(set(gt) - set(pred))
    extra = sorted(set(pred) - set(gt))
    if missing:
        raise CLIError(EXIT_DATA, f"no prediction for {', '.join(missing)}")
    if extra:
        raise CLIError(EXIT_DATA, f"no ground truth for {', '.join(extra)}")
    pairs = []
    for stem in sorted(gt):
        g, p = load_labels(gt[stem]), load_labels(pred[stem])
        if g.shape != p.shape:
            raise CLIError(EXIT_DATA, f"{stem}: label maps differ in size")
        pairs.append((stem, g, p))
    try:
        report = evaluation_report(pairs)
    except (INBDError, ShapeMismatch) as exc:
        raise CLIError(EXIT_DATA, str(exc)) from None
    out = Path(args.out)
    _ensure_dir(out.parent)
    write_json(report, out)
    _manifest(out.with_name(f"{out.stem}.manifest.json"), "evaluate", {},
              [f for s in sorted(gt) for f in (gt[s], pred[s])], [out], None, started)
    agg = report["aggregate"]
    print(f"mAR {agg['mAR_mean']:.4f}  ARAND {agg['ARAND_mean']:.4f}  ({len(pairs)} images)")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="inbd", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    parser.add_argument("--version", action="version", version=f"inbd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic ring dataset", formatter_class=fmt,
                       epilog="config keys (key = value lines) and defaults:\n"
                       + describe(SynthConfig, SYNTH_NOTES))
    p.add_argument("-c", "--config", help="synthetic data config file")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("-n", "--count", type=int, default=32, help="number of samples (32)")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train the pixel classifier or the next-ring network",
                       formatter_class=fmt, epilog="config keys (key = value lines) and "
                       "defaults:\n" + describe(TrainConfig, TRAIN_NOTES))
    p.add_argument("kind", choices=["seg", "inbd"])
    p.add_argument("-d", "--data", required=True, help="directory of <stem>.png + .labels.png")
    p.add_argument("-c", "--config", help="training config file")
    p.add_argument("-o", "--out", required=True, help="output parameter file")
    p.add_argument("--seg", help="seg maps for inbd training: a seg parameter file or 'oracle'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect rings in an image or a directory of images")
    p.add_argument("input", help="image file or directory")
    p.add_argument("--seg", required=True, help="seg parameter file or 'oracle'")
    p.add_argument("--model", required=True, help="next-ring parameter file or 'oracle'")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=2 * math.pi,
                   help="angular samples per pixel of radius (2*pi)")
    p.add_argument("--max-iters", type=int, default=100, help="ring cap (100)")
    p.add_argument("--n-radial", type=int, default=256, help="radial grid samples (256)")
    p.add_argument("--m-min", type=int, default=16, help="minimum angular samples (16)")
    p.add_argument("--overlay", action="store_true", help="also write <stem>.overlay.png")
    p.add_argument("--jobs", type=int, default=1, help="images processed in parallel (1)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predicted label maps against ground truth")
    p.add_argument("pred", help="directory of predicted <stem>.labels.png")
    p.add_argument("gt", help="directory of ground-truth <stem>.labels.png")
    p.add_argument("-o", "--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"inbd: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
