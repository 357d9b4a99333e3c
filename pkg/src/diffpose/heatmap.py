"""Keypoint <-> Gaussian heatmap conversion and the diffusion signal mapping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class KeypointSet:
    """Per-person joints in heatmap (or image) pixel coordinates.

    ``xy`` has shape (K, 2) holding (x, y); ``visible`` has shape (K,).
    """

    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.xy) == 0:
            raise ConfigError("KeypointSet needs at least one joint")
        if len(self.visible) != len(self.xy):
            raise ShapeError(
                f"{len(self.xy)} coordinates but {len(self.visible)} visibility flags"
            )

    @property
    def num_joints(self) -> int:
        return len(self.xy)

    def flip(self, width: int, flip_pairs: Sequence[tuple[int, int]] = ()) -> "KeypointSet":
        """Mirror horizontally on a grid of ``width`` pixels, swapping left/right joints."""
        xy = self.xy.copy()
        xy[:, 0] = (width - 1) - xy[:, 0]
        vis = self.visible.copy()
        order = np.arange(self.num_joints)
        for a, b in flip_pairs:
            order[a], order[b] = b, a
        return KeypointSet(xy[order], vis[order])

    def scaled(self, stride: float) -> "KeypointSet":
        """Map between image pixels and a grid ``stride`` times coarser (pixel-centre aligned)."""
        return KeypointSet((self.xy + 0.5) / stride - 0.5, self.visible.copy())

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return np.array_equal(self.xy, other.xy) and np.array_equal(self.visible, other.visible)


@dataclass(frozen=True)
class CodecConfig:
    num_joints: int
    resolution: tuple[int, int] = (16, 12)  # (H_h, W_h)
    sigma: float = 2.0
    amplitude: float = 1.0
    signal_scale: float = 1.0
    visibility_threshold: float = 0.25  # fraction of amplitude
    flip_pairs: tuple = field(default=())

    def __post_init__(self):
        if self.num_joints <= 0:
            raise ConfigError("num_joints must be positive")
        if self.sigma <= 0 or self.amplitude <= 0 or self.signal_scale <= 0:
            raise ConfigError("sigma, amplitude and signal_scale must all be positive")
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ConfigError(f"bad heatmap resolution {self.resolution!r}")


def encode_batch(xy: np.ndarray, visible: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Vectorised encoder: (B, K, 2) coords and (B, K) flags -> (B, K, H, W) float32."""
    visible = np.asarray(visible, dtype=bool)
    xy = np.nan_to_num(np.asarray(xy, dtype=np.float64))
    if xy.shape[-2] != config.num_joints:
        raise ConfigError(f"expected {config.num_joints} joints, got {xy.shape[-2]}")
    h, w = config.resolution
    # clamp visible joints into the grid
    x = np.clip(xy[..., 0], 0.0, w - 1)[..., None, None]
    y = np.clip(xy[..., 1], 0.0, h - 1)[..., None, None]
    u = np.arange(w, dtype=np.float64)[None, None, None, :]
    v = np.arange(h, dtype=np.float64)[None, None, :, None]
    du, dv = u - x, v - y
    s2 = 2.0 * config.sigma**2
    g = config.amplitude * np.exp(-(du**2) / s2) * np.exp(-(dv**2) / s2)
    cutoff = 3.0 * config.sigma
    g = np.where((np.abs(du) > cutoff) | (np.abs(dv) > cutoff), 0.0, g)
    g = np.where(visible[..., None, None], g, 0.0)
    return g.astype(np.float32)


def encode_heatmaps(keypoints: KeypointSet, config: CodecConfig) -> np.ndarray:
    """Render one Gaussian channel per joint; invisible joints give a zero channel."""
    if keypoints.num_joints != config.num_joints:
        raise ConfigError(
            f"keypoint set has {keypoints.num_joints} joints, config expects {config.num_joints}"
        )
    return encode_batch(keypoints.xy[None], keypoints.visible[None], config)[0]


def decode_batch(heatmaps: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Argmax decoding with a quarter-pixel shift toward the larger neighbour.

    Returns ``(xy, visible, peak)`` with shapes (..., K, 2), (..., K), (..., K).
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim < 3:
        raise ShapeError(f"heatmap must be (..., K, H, W), got shape {hm.shape}")
    if not np.all(np.isfinite(hm)):
        raise NumericError("heatmap contains non-finite values")
    lead = hm.shape[:-2]
    h, w = hm.shape[-2:]
    flat = hm.reshape(-1, h * w)
    idx = np.argmax(flat, axis=1)  # first occurrence == lowest row-major index
    peak = flat[np.arange(len(flat)), idx]
    py, px = np.divmod(idx, w)
    grid = hm.reshape(-1, h, w)
    rows = np.arange(len(flat))

    x = px.astype(np.float64)
    y = py.astype(np.float64)
    inner_x = (px > 0) & (px < w - 1)
    right = grid[rows, py, np.minimum(px + 1, w - 1)]
    left = grid[rows, py, np.maximum(px - 1, 0)]
    x += np.where(inner_x, 0.25 * np.sign(right - left), 0.0)
    inner_y = (py > 0) & (py < h - 1)
    down = grid[rows, np.minimum(py + 1, h - 1), px]
    up = grid[rows, np.maximum(py - 1, 0), px]
    y += np.where(inner_y, 0.25 * np.sign(down - up), 0.0)

    xy = np.stack([x, y], axis=-1).reshape(*lead, 2)
    return xy, (peak > threshold).reshape(lead), peak.reshape(lead)


def decode_keypoints(heatmap: np.ndarray, threshold: float = 0.25) -> KeypointSet:
    """Decode a (K, H, W) heatmap; a joint is visible when its peak exceeds ``threshold``."""
    hm = np.asarray(heatmap)
    if hm.ndim != 3:
        raise ShapeError(f"expected (K, H, W) heatmap, got shape {hm.shape}")
    xy, vis, _ = decode_batch(hm, threshold)
    return KeypointSet(xy, vis)


def normalize_for_diffusion(heatmap, config: CodecConfig):
    """[0, amplitude] -> [-signal_scale, +signal_scale]. Works on numpy arrays and tensors."""
    return (2.0 * heatmap / config.amplitude - 1.0) * config.signal_scale


def denormalize_from_diffusion(x, config: CodecConfig):
    v = (x / config.signal_scale + 1.0) * (0.5 * config.amplitude)
    return v.clip(0.0, config.amplitude)
