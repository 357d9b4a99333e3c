"""On-disk dataset layout, COCO-style keypoint annotations and person-clip cropping.

Dataset layout::

    root/
      dataset.json            scene config echo + clip directory list
      annotations.json        keyframe labels as {"annotations": [...]}
      clip_00000/
        frame_00.ppm ...      2*delta+1 binary PPM frames
        gt.json               per-frame keypoints, bbox, difficulty flags
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import SyntheticSceneConfig, from_flat, to_jsonable
from .errors import AnnotationError, ConfigError, CropError
from .heatmap import KeypointSet
from .synthetic import Clip


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- annotations


@dataclass
class AnnotationRecord:
    image_id: int
    person_id: int
    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray  # (K, 3): x, y, v with v in {0, 1, 2}
    score: float | None = None

    @property
    def num_joints(self) -> int:
        return len(self.keypoints)

    def keypoint_set(self) -> KeypointSet:
        return KeypointSet(self.keypoints[:, :2], self.keypoints[:, 2] == 2)

    @classmethod
    def from_keypoints(cls, image_id: int, kps: KeypointSet, bbox, person_id: int = 0,
                       labelled: np.ndarray | None = None, score: float | None = None):
        v = np.where(kps.visible, 2, 1 if labelled is None else np.where(labelled, 1, 0))
        trip = np.column_stack([kps.xy, v]).astype(np.float64)
        return cls(int(image_id), int(person_id), tuple(float(b) for b in bbox), trip, score)

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "person_id": self.person_id,
            "bbox": [float(b) for b in self.bbox],
            "keypoints": [float(v) if i % 3 < 2 else int(v)
                          for i, v in enumerate(self.keypoints.reshape(-1))],
        }
        if self.score is not None:
            out["score"] = float(self.score)
        return out

    def __eq__(self, other):
        if not isinstance(other, AnnotationRecord):
            return NotImplemented
        return (self.image_id == other.image_id and self.person_id == other.person_id
                and tuple(self.bbox) == tuple(other.bbox) and self.score == other.score
                and np.array_equal(self.keypoints, other.keypoints))


def _record_lines(text: str, count: int) -> list[int | None]:
    """1-based line of each element in the annotations array, best effort."""
    m = re.search(r'"annotations"\s*:\s*\[', text)
    pos = m.end() if m else text.find("[") + 1
    dec = json.JSONDecoder()
    lines: list[int | None] = []
    ws = re.compile(r"[\s,]*")
    for _ in range(count):
        pos = ws.match(text, pos).end()
        lines.append(text.count("\n", 0, pos) + 1)
        try:
            _, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError:
            lines.extend([None] * (count - len(lines)))
            break
    return lines


def parse_annotations(data, num_joints: int | None = None, text: str | None = None,
                      source: str = "<memory>") -> list[AnnotationRecord]:
    if isinstance(data, dict):
        if "annotations" not in data:
            raise AnnotationError(f"{source}: missing top-level 'annotations' array")
        items = data["annotations"]
    else:
        items = data
    if not isinstance(items, list):
        raise AnnotationError(f"{source}: 'annotations' must be an array")
    lines = _record_lines(text, len(items)) if text is not None else [None] * len(items)
    records = []
    for i, item in enumerate(items):
        where = f"{source}: record {i}" + (f" (line {lines[i]})" if lines[i] else "")
        if not isinstance(item, dict):
            raise AnnotationError(f"{where}: expected an object")
        for key in ("bbox", "keypoints"):
            if key not in item:
                raise AnnotationError(f"{where}: missing field '{key}'")
        bbox, kps = item["bbox"], item["keypoints"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise AnnotationError(f"{where}: bbox must be [x, y, w, h]")
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise AnnotationError(f"{where}: bbox width and height must be positive")
        if not isinstance(kps, list) or len(kps) == 0 or len(kps) % 3:
            raise AnnotationError(f"{where}: keypoints length {len(kps) if isinstance(kps, list) else '?'} is not 3K")
        k = len(kps) // 3
        if num_joints is not None and k != num_joints:
            raise AnnotationError(f"{where}: keypoints length {len(kps)} != 3*{num_joints}")
        trip = np.asarray(kps, dtype=np.float64).reshape(k, 3)
        if not np.isin(trip[:, 2], (0, 1, 2)).all():
            raise AnnotationError(f"{where}: visibility flags must be 0, 1 or 2")
        records.append(AnnotationRecord(
            image_id=int(item.get("image_id", i)),
            person_id=int(item.get("person_id", 0)),
            bbox=tuple(float(b) for b in bbox),
            keypoints=trip,
            score=float(item["score"]) if "score" in item else None,
        ))
    ks = {r.num_joints for r in records}
    if len(ks) > 1:
        raise AnnotationError(f"{source}: records disagree on joint count {sorted(ks)}")
    return records


def load_keypoint_annotations(path: str | os.PathLike, num_joints: int | None = None) -> list[AnnotationRecord]:
    """Read a COCO-style keypoint file (object with "annotations") or a bare prediction array."""
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError as exc:
        raise AnnotationError(f"{p}: file not found") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_annotations(data, num_joints, text=text, source=str(p))


def write_annotations(records: Iterable[AnnotationRecord], path: str | os.PathLike,
                      bare: bool = False):
    items = [r.to_json() for r in records]
    _dump(items if bare else {"annotations": items}, Path(path))


# ---------------------------------------------------------------- dataset io


def _clip_dir(root: Path, clip_id: int) -> Path:
    return root / f"clip_{clip_id:05d}"


def write_clip(clip: Clip, directory: str | os.PathLike):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(clip.frames):
        name = f"frame_{i:02d}.ppm"
        Image.fromarray(frame, mode="RGB").save(d / name, format="PPM")
        names.append(name)
    gt = {
        "clip_id": clip.clip_id,
        "delta": clip.delta,
        "frames": names,
        "bbox": [float(b) for b in clip.bbox],
        "high_motion": clip.high_motion,
        "occluded": clip.occluded,
        "keypoints": [
            [float(v) for v in np.column_stack([k.xy, k.visible]).reshape(-1)]
            for k in clip.keypoints
        ],
    }
    _dump(gt, d / "gt.json")


def read_clip(directory: str | os.PathLike) -> Clip:
    d = Path(directory)
    try:
        gt = json.loads((d / "gt.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{d}: missing gt.json") from exc
    frames = np.stack([np.asarray(Image.open(d / n).convert("RGB")) for n in gt["frames"]])
    kps = []
    for flat in gt["keypoints"]:
        arr = np.asarray(flat, dtype=np.float64).reshape(-1, 3)
        kps.append(KeypointSet(arr[:, :2], arr[:, 2] > 0))
    return Clip(frames, kps, tuple(gt["bbox"]), bool(gt["high_motion"]), bool(gt["occluded"]),
                int(gt["clip_id"]))


def write_dataset(clips: Sequence[Clip], root: str | os.PathLike,
                  scene: SyntheticSceneConfig | None = None):
    r = Path(root)
    r.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        write_clip(clip, _clip_dir(r, clip.clip_id))
    index = {
        "clips": [_clip_dir(r, c.clip_id).name for c in clips],
        "scene": to_jsonable(scene.__dict__) if scene is not None else None,
    }
    _dump(index, r / "dataset.json")
    records = [AnnotationRecord.from_keypoints(c.clip_id, c.keyframe, c.bbox) for c in clips]
    write_annotations(records, r / "annotations.json")


def read_dataset(root: str | os.PathLike) -> list[Clip]:
    r = Path(root)
    try:
        index = json.loads((r / "dataset.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{r}: not a dataset directory (missing dataset.json)") from exc
    return [read_clip(r / name) for name in index["clips"]]


def read_scene_config(root: str | os.PathLike) -> SyntheticSceneConfig | None:
    index = json.loads((Path(root) / "dataset.json").read_text())
    if not index.get("scene"):
        return None
    return from_flat(index["scene"], env=False).scene


# ---------------------------------------------------------------- cropping


def enlarge_bbox(bbox, factor: float = 1.25) -> tuple[float, float, float, float]:
    x, y, w, h = bbox
    nw, nh = w * factor, h * factor
    return (x + w / 2 - nw / 2, y + h / 2 - nh / 2, nw, nh)


@dataclass(frozen=True)
class CropTransform:
    """Affine map from source image pixels to crop pixels (pixel-centre convention)."""

    x0: float
    y0: float
    sx: float
    sy: float

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return np.column_stack([(xy[:, 0] - self.x0 + 0.5) * self.sx - 0.5,
                                (xy[:, 1] - self.y0 + 0.5) * self.sy - 0.5])

    def invert(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return np.column_stack([(xy[:, 0] + 0.5) / self.sx - 0.5 + self.x0,
                                (xy[:, 1] + 0.5) / self.sy - 0.5 + self.y0])


def crop_region(bbox, image_size: tuple[int, int], factor: float = 1.25):
    """Enlarged box clamped to the image, as (x0, y0, x1, y1) in pixel-edge coordinates."""
    h, w = image_size
    x, y, bw, bh = enlarge_bbox(bbox, factor)
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + bw, float(w)), min(y + bh, float(h))
    if x1 <= x0 or y1 <= y0:
        raise CropError(f"bbox {tuple(bbox)} does not intersect the {h}x{w} image")
    return x0, y0, x1, y1


def crop_person_clip(frames: np.ndarray, bbox, delta: int, target_size: tuple[int, int] = (64, 48),
                     keyframe: int | None = None) -> tuple[np.ndarray, CropTransform]:
    """Crop the same enlarged, clamped box out of 2*delta+1 frames and resize bilinearly.

    ``frames`` is (F, H, W, C); returns ((2*delta+1, th, tw, C) float array, transform).
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    n = len(frames)
    centre = n // 2 if keyframe is None else keyframe
    if centre - delta < 0 or centre + delta >= n:
        raise CropError(f"need frames {centre - delta}..{centre + delta}, have 0..{n - 1}")
    window = frames[centre - delta: centre + delta + 1].astype(np.float64)
    x0, y0, x1, y1 = crop_region(bbox, frames.shape[1:3])
    th, tw = target_size
    tf = CropTransform(x0, y0, tw / (x1 - x0), th / (y1 - y0))
    # output pixel centre (i, j) samples source at the inverse affine map
    rows = (np.arange(th) + 0.5) / tf.sy - 0.5 + y0
    cols = (np.arange(tw) + 0.5) / tf.sx - 0.5 + x0
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((len(window), th, tw, window.shape[-1]))
    for f, frame in enumerate(window):
        for c in range(frame.shape[-1]):
            out[f, :, :, c] = ndimage.map_coordinates(frame[..., c], [rr, cc], order=1, mode="nearest")
    return out, tf
