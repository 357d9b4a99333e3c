"""Command line entry point: ``diffpose <subcommand> ...``.

Every failure prints one JSON object on stderr, ``{"error": kind, "message": ...}``.
Usage, configuration, schema and missing-file errors exit with 2, anything else with 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import engine
from .config import InferenceOptions, load_config
from .data import (AnnotationRecord, load_keypoint_annotations, read_dataset, write_annotations,
                   write_dataset)
from .errors import AnnotationError, DiffPoseError
from .metrics import DEFAULT_THRESHOLDS, evaluate
from .model import load_checkpoint
from .synthetic import JOINT_NAMES, generate_dataset

USAGE_KINDS = {"config", "parse", "usage", "io"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _report_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must be positive")
    return vals


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------- subcommands


def cmd_make_data(args) -> int:
    run = load_config(args.config)
    seed = run.scene.seed if args.seed is None else args.seed
    clips = generate_dataset(run.scene, args.count, seed=seed, start=args.start)
    write_dataset(clips, args.out, run.scene)
    logging.info("wrote %d clips to %s", len(clips), args.out)
    return 0


def cmd_train(args) -> int:
    run = load_config(args.config)
    clips = read_dataset(_require_dir(Path(args.data), "dataset"))
    if args.epochs is not None:
        run.train = dataclasses.replace(run.train, epochs=args.epochs)
    out = Path(args.out)
    res = engine.train(clips, run, out_dir=out, checkpoint_every=args.checkpoint_every)
    (out / "config.json").write_text(json.dumps(run.to_flat(), indent=2, sort_keys=True) + "\n")
    logging.info("final loss %.6f after %d steps", res.losses[-1][3], len(res.losses))
    return 0


def _options(args, ckpt) -> InferenceOptions:
    base = ckpt.config.infer
    return InferenceOptions(
        steps=base.steps if args.steps is None else args.steps,
        N=base.N if args.N is None else args.N,
        seed=base.seed if args.seed is None else args.seed,
    )


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(_require_dir(Path(args.checkpoint), "checkpoint"), with_optimizer=False)
    clips = read_dataset(_require_dir(Path(args.data), "dataset"))
    opts = _options(args, ckpt)
    pred = engine.predict_clips(ckpt, clips, opts)
    records = [
        AnnotationRecord.from_keypoints(c.clip_id, k, c.bbox, score=round(float(np.mean(p)), 6))
        for c, k, p in zip(clips, pred.keypoints, pred.peaks)
    ]
    write_annotations(records, args.out, bare=True)
    logging.info("wrote %d predictions to %s", len(records), args.out)
    return 0


def cmd_eval(args) -> int:
    preds = load_keypoint_annotations(args.predictions)
    gt_path = Path(args.gt) if args.gt else Path(args.data) / "annotations.json"
    gts = load_keypoint_annotations(gt_path)
    by_id = {}
    for r in preds:
        if r.image_id in by_id:
            raise AnnotationError(f"{args.predictions}: duplicate prediction for image {r.image_id}")
        by_id[r.image_id] = r
    missing = [g.image_id for g in gts if g.image_id not in by_id]
    if missing:
        raise AnnotationError(f"no prediction for image(s) {missing[:5]}")
    k = gts[0].num_joints if gts else 0
    matched = [by_id[g.image_id] for g in gts]
    if any(p.num_joints != k for p in matched):
        raise AnnotationError(f"prediction joint count differs from ground truth ({k})")
    report = evaluate([p.keypoint_set() for p in matched], [g.keypoint_set() for g in gts],
                      [g.bbox for g in gts], args.thresholds, JOINT_NAMES[:k] if k <= len(JOINT_NAMES) else (),
                      {"predictions": str(args.predictions), "ground_truth": str(gt_path)})
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def _write_rows(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else f"{v:.6f}" if isinstance(v, float) else v)
                        for k, v in row.items()})


def cmd_ablate(args) -> int:
    ckpt = load_checkpoint(_require_dir(Path(args.checkpoint), "checkpoint"), with_optimizer=False)
    clips = read_dataset(_require_dir(Path(args.data), "dataset"))
    seed = ckpt.config.infer.seed if args.seed is None else args.seed
    rows = engine.ablation_grid(ckpt, clips, Ns=args.Ns, steps_list=args.steps_list, seed=seed,
                                thresholds=args.thresholds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(rows, out)
    if args.figure:
        from .plotting import ablation_chart
        ablation_chart(rows, args.figure, metric=f"pck@{args.thresholds[len(args.thresholds) // 2]:g}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import line_chart
    line_chart(args.input, args.x, args.y, args.out, log_y=args.log_y, title=args.title)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffpose", description="Diffusion-based video pose estimation on synthetic clips.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-data", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--start", type=int, default=0, help="first clip id")
    s.add_argument("--config", help="JSON config (scene keys are used)")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train a model, write checkpoints and loss.csv")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--checkpoint-every", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict keyframe poses as a JSON array")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--N", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--predictions", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="dataset directory (uses its annotations.json)")
    g.add_argument("--gt", help="ground-truth annotation file")
    s.add_argument("--out", help="report JSON (default: stdout)")
    s.add_argument("--csv", help="also write the per-joint table as CSV")
    s.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep ensemble size and sampling steps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="comparison CSV")
    s.add_argument("--figure", help="SVG chart of the grid")
    s.add_argument("--Ns", type=_int_list, default=(1, 5, 10))
    s.add_argument("--steps-list", type=_int_list, default=(1, 2, 4))
    s.add_argument("--seed", type=int)
    s.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot", help="CSV columns to an SVG line chart")
    s.add_argument("--input", required=True)
    s.add_argument("--x", required=True)
    s.add_argument("--y", required=True, action="append")
    s.add_argument("--out", required=True)
    s.add_argument("--log-y", action="store_true")
    s.add_argument("--title")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _report_error("usage", str(exc))
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DiffPoseError as exc:
        _report_error(exc.kind, str(exc))
        return 2 if exc.kind in USAGE_KINDS else 1
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        _report_error("io", str(exc))
        return 2
    except (KeyError, json.JSONDecodeError) as exc:
        _report_error("parse", f"malformed input: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
