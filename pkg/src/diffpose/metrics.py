"""PCK evaluation and report serialisation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .heatmap import KeypointSet

DEFAULT_THRESHOLDS = (0.05, 0.1, 0.2)


def bbox_diagonal(bbox) -> float:
    return math.hypot(bbox[2], bbox[3])


def pck(pred: KeypointSet, gt: KeypointSet, r: float, bbox) -> tuple[np.ndarray, float | None]:
    """Per-joint hit (1.0/0.0, NaN where gt is invisible) and their mean.

    The mean is ``None`` when no gt joint is visible: the metric is undefined, not zero.
    """
    if pred.num_joints != gt.num_joints:
        raise ShapeError(f"pred has {pred.num_joints} joints, gt has {gt.num_joints}")
    if r <= 0:
        raise ValueError("PCK threshold must be positive")
    err = np.linalg.norm(pred.xy - gt.xy, axis=1)
    hits = np.where(gt.visible, (err <= r * bbox_diagonal(bbox)).astype(float), np.nan)
    if not gt.visible.any():
        return hits, None
    return hits, float(np.nanmean(hits))


@dataclass
class MetricReport:
    thresholds: tuple[float, ...]
    per_joint: dict[float, list[float | None]]  # threshold -> per-joint PCK (None if never visible)
    mean: dict[float, float | None]
    counts: list[int]
    num_clips: int
    joint_names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "thresholds": list(self.thresholds),
            "per_joint": {f"{r:g}": v for r, v in self.per_joint.items()},
            "mean": {f"{r:g}": v for r, v in self.mean.items()},
            "counts": self.counts,
            "num_clips": self.num_clips,
            "joint_names": self.joint_names,
            "config": self.config,
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["joint"] + [f"pck@{r:g}" for r in self.thresholds] + ["count"])
        for k, n in enumerate(self.counts):
            name = self.joint_names[k] if k < len(self.joint_names) else str(k)
            w.writerow([name] + [_fmt(self.per_joint[r][k]) for r in self.thresholds] + [n])
        w.writerow(["mean"] + [_fmt(self.mean[r]) for r in self.thresholds] + [sum(self.counts)])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def evaluate(preds: Sequence[KeypointSet], gts: Sequence[KeypointSet], bboxes: Sequence,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS, joint_names: Sequence[str] = (),
             config: dict | None = None) -> MetricReport:
    """Aggregate PCK over clips: per-joint hit rate, mean over joints that were ever visible."""
    if not (len(preds) == len(gts) == len(bboxes)):
        raise ShapeError("preds, gts and bboxes must have the same length")
    if not gts:
        raise ShapeError("nothing to evaluate")
    k = gts[0].num_joints
    counts = np.zeros(k, dtype=int)
    hits = {r: np.zeros(k) for r in thresholds}
    for p, g, b in zip(preds, gts, bboxes):
        counts += g.visible
        for r in thresholds:
            h, _ = pck(p, g, r, b)
            hits[r] += np.nan_to_num(h)
    per_joint, mean = {}, {}
    for r in thresholds:
        vals = [float(hits[r][j] / counts[j]) if counts[j] else None for j in range(k)]
        per_joint[r] = vals
        present = [v for v in vals if v is not None]
        mean[r] = float(np.mean(present)) if present else None
    return MetricReport(tuple(thresholds), per_joint, mean, counts.tolist(), len(gts),
                        list(joint_names), dict(config or {}))
