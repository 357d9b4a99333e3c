"""Seeded articulated stick-figure videos with exact joint labels.

Each clip is a person-centred crop: the nominal person box is the frame shrunk by
the 25% crop enlargement, so enlarging it again recovers the full frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SyntheticSceneConfig
from .errors import ConfigError, GenerationError
from .heatmap import KeypointSet

JOINT_NAMES = (
    "head", "left_shoulder", "right_shoulder", "left_wrist", "right_wrist",
    "pelvis", "left_ankle", "right_ankle",
)
# rest pose as fractions of the person box (x, y)
REST_POSE = np.array([
    [0.50, 0.08], [0.28, 0.28], [0.72, 0.28], [0.12, 0.55], [0.88, 0.55],
    [0.50, 0.60], [0.32, 0.94], [0.68, 0.94],
])
LIMBS = ((0, 1), (0, 2), (1, 3), (2, 4), (1, 5), (2, 5), (5, 6), (5, 7))
FLIP_PAIRS = ((1, 2), (3, 4), (6, 7))
JOINT_COLORS = np.array([
    [1.0, 1.0, 1.0], [1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [1.0, 0.6, 0.0],
    [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [1.0, 0.2, 1.0], [0.4, 0.4, 1.0],
])
MAX_ATTEMPTS = 50


def flip_pairs_for(num_joints: int) -> tuple[tuple[int, int], ...]:
    return tuple((a, b) for a, b in FLIP_PAIRS if b < num_joints)


def person_box(image_size: tuple[int, int]) -> tuple[float, float, float, float]:
    """(x, y, w, h) of the nominal person box: the frame shrunk by 1/1.25 about its centre."""
    h, w = image_size
    bw, bh = w / 1.25, h / 1.25
    return ((w - bw) / 2, (h - bh) / 2, bw, bh)


@dataclass
class Clip:
    frames: np.ndarray  # (F, H, W, 3) uint8
    keypoints: list[KeypointSet]  # per frame, image pixels
    bbox: tuple[float, float, float, float]
    high_motion: bool
    occluded: bool
    clip_id: int = 0

    @property
    def delta(self) -> int:
        return (len(self.frames) - 1) // 2

    @property
    def keyframe(self) -> KeypointSet:
        return self.keypoints[self.delta]

    @property
    def hard(self) -> bool:
        return self.high_motion or self.occluded

    def window(self, delta: int) -> np.ndarray:
        """Frames of the centred window of half-width ``delta``."""
        if delta > self.delta:
            raise ConfigError(f"clip has delta {self.delta}, cannot take window {delta}")
        return self.frames[self.delta - delta: self.delta + delta + 1]

    def tensor(self, delta: int | None = None) -> np.ndarray:
        """(F, 3, H, W) float32 in [0, 1]."""
        frames = self.frames if delta is None else self.window(delta)
        return (frames.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def _trajectories(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Joint positions (F, K, 2) in image pixels."""
    k = cfg.num_joints
    h, w = cfg.image_size
    bx, by, bw, bh = person_box(cfg.image_size)
    scale = rng.uniform(0.85, 1.0)
    centre = np.array([bx + bw / 2, by + bh / 2]) + rng.uniform(-2.0, 2.0, size=2)
    rest = (REST_POSE[:k] - 0.5) * np.array([bw, bh]) * scale + centre
    rest = rest + cfg.pose_jitter * rng.uniform(-1.0, 1.0, size=(k, 2))

    amp = rng.uniform(*cfg.motion_amplitude, size=(k, 2))
    freq = rng.uniform(*cfg.motion_frequency, size=(k, 2))
    phase = rng.uniform(0.0, 2 * np.pi, size=(k, 2))
    drift = rng.uniform(-cfg.global_motion, cfg.global_motion, size=2)
    tau = np.arange(2 * cfg.delta + 1, dtype=np.float64) - cfg.delta
    wave = np.sin(2 * np.pi * freq[None] * tau[:, None, None] + phase[None])
    # zero displacement at the keyframe keeps the labelled pose on the rest pose
    wave = wave - np.sin(phase)[None]
    return rest[None] + drift[None, None] * tau[:, None, None] + amp[None] * wave


def _segment_distance(px, py, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    s = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + s * d[0]), py - (a[1] + s * d[1]))


def render_frame(points: np.ndarray, shown: np.ndarray, cfg: SyntheticSceneConfig,
                 background: np.ndarray) -> np.ndarray:
    """Render one (H, W, 3) float frame: grey limbs under coloured joint blobs."""
    h, w = cfg.image_size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    img = background.copy()
    limb = np.zeros((h, w))
    for a, b in LIMBS:
        if a >= len(points) or b >= len(points) or not (shown[a] and shown[b]):
            continue
        d = _segment_distance(px, py, points[a], points[b])
        limb = np.maximum(limb, np.clip(1.0 - (d - cfg.limb_thickness / 2), 0.0, 1.0))
    img = np.maximum(img, cfg.limb_intensity * limb[..., None])
    r = cfg.blob_radius
    for j, (x, y) in enumerate(points):
        if not shown[j]:
            continue
        d2 = (px - x) ** 2 + (py - y) ** 2
        blob = np.where(d2 <= (3 * r) ** 2, np.exp(-d2 / (2 * r * r)), 0.0)
        img = np.maximum(img, blob[..., None] * JOINT_COLORS[j % len(JOINT_COLORS)])
    return img


def generate_synthetic_clip(cfg: SyntheticSceneConfig, seed: int, clip_id: int = 0) -> Clip:
    """Deterministically render a (2*delta+1)-frame clip and its per-frame labels."""
    if cfg.num_joints > len(REST_POSE):
        raise ConfigError(f"skeleton has {len(REST_POSE)} joints, asked for {cfg.num_joints}")
    rng = np.random.default_rng([seed, clip_id])
    h, w = cfg.image_size
    k = cfg.num_joints
    nf = 2 * cfg.delta + 1
    occluded = rng.random(k) < cfg.occlusion_prob
    for _ in range(MAX_ATTEMPTS):
        traj = _trajectories(cfg, rng)
        inside = (traj[..., 0] >= 0) & (traj[..., 0] <= w - 1) & (traj[..., 1] >= 0) & (traj[..., 1] <= h - 1)
        if inside[:, ~occluded].all():
            break
    else:
        raise GenerationError(
            f"clip {clip_id}: visible joint trajectories leave the {h}x{w} frame "
            f"in {MAX_ATTEMPTS} draws; reduce motion amplitude or drift"
        )
    dropped = rng.random((nf, k)) < cfg.dropout_prob
    background = 0.1 + rng.normal(0.0, cfg.noise_std, size=(h, w, 3))
    frames = []
    for f in range(nf):
        shown = ~occluded & ~dropped[f]
        img = render_frame(traj[f], shown, cfg, background)
        if cfg.frame_noise_std > 0:
            img = img + rng.normal(0.0, cfg.frame_noise_std, size=img.shape)
        frames.append(np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
    speed = np.linalg.norm(np.diff(traj, axis=0), axis=-1).mean() if nf > 1 else 0.0
    kps = [KeypointSet(traj[f], ~occluded) for f in range(nf)]
    return Clip(
        frames=np.stack(frames),
        keypoints=kps,
        bbox=person_box(cfg.image_size),
        high_motion=bool(speed > cfg.high_motion_threshold),
        occluded=bool(occluded.any() or dropped[cfg.delta].any()),
        clip_id=clip_id,
    )


def generate_dataset(cfg: SyntheticSceneConfig, count: int, seed: int | None = None,
                     start: int = 0) -> list[Clip]:
    seed = cfg.seed if seed is None else seed
    return [generate_synthetic_clip(cfg, seed, i) for i in range(start, start + count)]
