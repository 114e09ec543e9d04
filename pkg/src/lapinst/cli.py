"""Command-line interface: ``lapinst {synth,train,detect,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .cascade import classify_frame, detection_record
from .config import load_config
from .dataset import load_dataset, load_frames_dir, write_gray, write_rgb
from .errors import LapInstError
from .evaluation import loso_splits, run_evaluation
from .modelfile import load_model, save_model
from .pipeline import TrainStats, train_pipeline
from .synth import SynthParams, write_dataset

log = logging.getLogger("lapinst")

OVERLAY_COLOURS = {
    "no_instrument": (128, 128, 128),
    "ligasure": (60, 120, 255),
    "atraumatic_grasper": (60, 220, 90),
    "aspirator": (240, 240, 240),
    "clip_applier": (255, 210, 40),
}


class UsageError(Exception):
    pass


def _default_jobs() -> int:
    return os.cpu_count() or 1


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise UsageError(f"{what} {path} is not a directory")


def _require_writable_target(path: Path, what: str) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{what} {path} exists and is not a directory")


def _require_parent(path: Path) -> None:
    parent = path.resolve().parent
    if not parent.is_dir():
        raise UsageError(f"directory {parent} does not exist")


def _load_config(path):
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    _require_writable_target(out, "output")
    params = SynthParams(seed=args.seed, frames=args.frames, surgeries=args.surgeries,
                         width=args.width, height=args.height, max_tools=args.max_tools)
    print(f"seed: {args.seed}")
    manifest = write_dataset(params, out)
    n_boxes = sum(len(f["boxes"]) for f in manifest["frames"])
    print(f"wrote {manifest['frame_count']} frames, {n_boxes} boxes to {out}")
    return 0


def cmd_train(args) -> int:
    root = Path(args.dataset_dir)
    _require_dir(root, "dataset")
    model_out = Path(args.model_out)
    _require_parent(model_out)
    config = _load_config(args.config)
    dataset = load_dataset(root)
    if len(dataset) == 0:
        raise UsageError(f"dataset {root} holds no frames")
    print(f"seed: {args.seed}")
    stats = TrainStats()
    t = time.perf_counter()
    model = train_pipeline(dataset, config, args.seed, args.jobs, stats=stats)
    total = time.perf_counter() - t
    size = save_model(model, model_out)
    for stage, seconds in stats.timings_s.items():
        print(f"  {stage:<13} {seconds:8.2f} s")
    for key, value in stats.counts.items():
        print(f"  {key:<13} {value}")
    print(f"trained in {total:.1f} s; wrote {size} bytes to {model_out}")
    return 0


def draw_overlay(pixels: np.ndarray, detections) -> np.ndarray:
    img = np.ascontiguousarray(pixels.copy())
    for d in detections:
        b = d.box
        colour = OVERLAY_COLOURS.get(d.label.label, (255, 0, 255))
        cv2.rectangle(img, (b.x, b.y), (b.x2 - 1, b.y2 - 1), colour, 1)
        cv2.putText(img, d.label.label, (b.x, max(b.y - 3, 8)), cv2.FONT_HERSHEY_SIMPLEX,
                    0.35, colour, 1, cv2.LINE_AA)
    return img


def latency_summary(values) -> dict:
    if not values:
        return {"mean": None, "p50": None, "p90": None, "p99": None}
    a = np.asarray(values)
    return {"mean": float(a.mean()), "p50": float(np.percentile(a, 50)),
            "p90": float(np.percentile(a, 90)), "p99": float(np.percentile(a, 99))}


def cmd_detect(args) -> int:
    frames_dir = Path(args.frames_dir)
    _require_dir(frames_dir, "frames")
    out = Path(args.out)
    _require_parent(out)
    for target, what in ((args.overlay, "overlay"), (args.masks, "masks")):
        if target:
            _require_writable_target(Path(target), what)
    try:
        model = load_model(args.model)
    except OSError as exc:
        raise UsageError(f"cannot read model: {exc}") from None
    frames = load_frames_dir(frames_dir)

    def run(frame):
        return classify_frame(model, frame, keep_segmentation=bool(args.masks))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, frames))
    else:
        results = [run(f) for f in frames]

    with open(out, "w") as fh:
        for result in results:
            for det in result.detections:
                fh.write(json.dumps(detection_record(result, det), sort_keys=True) + "\n")
    if args.overlay:
        overlay_dir = Path(args.overlay)
        for frame, result in zip(frames, results):
            write_rgb(overlay_dir / f"{frame.frame_id}.png", draw_overlay(frame.pixels, result.detections))
    if args.masks:
        masks_dir = Path(args.masks)
        masks_dir.mkdir(parents=True, exist_ok=True)
        for frame, result in zip(frames, results):
            seg = result.segmentation
            if seg is None:
                seg = np.zeros((frame.height, frame.width), dtype=bool)
            write_gray(masks_dir / f"{frame.frame_id}.png", seg.astype(np.uint8) * 255)

    det = latency_summary([r.t_detect_ms for r in results])
    ident = latency_summary([r.t_identify_ms for r in results])
    n = sum(len(r.detections) for r in results)
    print(f"{len(results)} frames, {n} detections -> {out}")
    if results:
        for name, s in (("detect", det), ("identify", ident)):
            print(f"  {name:<9} mean {s['mean']:7.1f} ms  p50 {s['p50']:7.1f}  "
                  f"p90 {s['p90']:7.1f}  p99 {s['p99']:7.1f}")
    return 0


def cmd_eval(args) -> int:
    root = Path(args.dataset_dir)
    _require_dir(root, "dataset")
    if args.test_dir:
        _require_dir(Path(args.test_dir), "test dataset")
    out = Path(args.out_dir)
    _require_writable_target(out, "output")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    config = _load_config(args.config)
    dataset = load_dataset(root)
    loso_splits(dataset)
    test_dataset = load_dataset(args.test_dir) if args.test_dir else None
    print(f"seed: {args.seed}")
    t = time.perf_counter()
    report = run_evaluation(dataset, config, args.repeats, args.seed, args.jobs, test_dataset)
    report.write(out)
    print(f"{len(report.folds)} folds in {time.perf_counter() - t:.1f} s -> {out}")
    for set_name, agg in report.aggregate().items():
        seg = agg["segmentation"]
        print(f"{set_name}: segmentation precision {seg['precision']:.3f}  "
              f"recall {seg['recall']:.3f}  dice {seg['dice']:.3f}")
        for name in ("manual", "automatic"):
            s = agg[name]
            print(f"  {name:<10} mean class accuracy {_rate(s['mean_class_accuracy'])}  "
                  f"detection rate {_rate(s['detection_rate'])}")
    failed = [f for f in report.folds if f.error]
    for f in failed:
        print(f"fold {f.fold} (repeat {f.repeat}) failed: {f.error}", file=sys.stderr)
    return 1 if failed else 0


def _rate(value) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapinst", description="Laparoscopic instrument detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=210)
    p.add_argument("--surgeries", type=int, default=3)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--max-tools", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a pipeline model")
    p.add_argument("dataset_dir")
    p.add_argument("model_out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect and identify instruments in a directory of frames")
    p.add_argument("model")
    p.add_argument("frames_dir")
    p.add_argument("out", help="detections JSON-lines file")
    p.add_argument("--overlay", metavar="DIR", help="also write annotated PNGs here")
    p.add_argument("--masks", metavar="DIR", help="also write segmentation maps (0/255 PNG) here")
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="leave-one-surgery-out evaluation")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--config")
    p.add_argument("--test-dir", help="optional second data set scored with the same folds")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, LapInstError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
