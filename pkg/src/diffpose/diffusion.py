"""Cosine noise schedule, forward corruption and the deterministic DDIM update."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, OrderingError, ShapeError, StepRangeError

MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention ``alpha_bar[t]`` for t = 0..T."""

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        if len(self.alpha_bar) != self.T + 1:
            raise ShapeError(f"alpha_bar needs {self.T + 1} entries, got {len(self.alpha_bar)}")
        self.alpha_bar.setflags(write=False)

    def at(self, t: int) -> float:
        """``alpha_bar`` with the sampler convention that t = -1 means a clean signal."""
        if t == -1:
            return 1.0
        if not 0 <= t <= self.T:
            raise StepRangeError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]


def build_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """alpha_bar[t] = f(t) / f(0) with f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2).

    Per-step betas are capped at ``MAX_BETA`` so the table stays strictly decreasing
    and positive at t = T, where the raw formula reaches zero.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if s <= 0:
        raise ConfigError(f"offset s must be positive, got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    raw = f / f[0]
    alpha_bar = np.empty_like(raw)
    alpha_bar[0] = 1.0
    for i in range(1, T + 1):
        alpha_bar[i] = max(raw[i], (1.0 - MAX_BETA) * alpha_bar[i - 1])
    return NoiseSchedule(T, alpha_bar)


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if not 0 <= t <= schedule.T:
        raise StepRangeError(f"step {t} outside [0, {schedule.T}]")
    ab = schedule.at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_diffuse_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                          schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample steps ``t`` of shape (B,) for a batch ``x0`` of shape (B, ...)."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if t.min() < 0 or t.max() > schedule.T:
        raise StepRangeError(f"steps outside [0, {schedule.T}]")
    ab = torch.tensor(schedule.alpha_bar, dtype=x0.dtype)[t.long()]
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


@dataclass(frozen=True)
class SamplingPlan:
    pairs: tuple[tuple[int, int], ...]

    @property
    def steps(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def make_sampling_plan(T: int, steps: int) -> SamplingPlan:
    """``steps`` (t_now, t_next) pairs from ``steps + 1`` evenly spaced points on [-1, T-1]."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ConfigError(f"steps ({steps}) cannot exceed T ({T})")
    times = np.floor(np.linspace(-1.0, T - 1.0, steps + 1) + 0.5).astype(int)[::-1]
    return SamplingPlan(tuple((int(a), int(b)) for a, b in zip(times[:-1], times[1:])))


def ddim_step(x_t, x0_hat, t_now: int, t_next: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) jump from ``t_now`` to ``t_next`` given a predicted x0."""
    if t_now <= t_next:
        raise OrderingError(f"t_now ({t_now}) must exceed t_next ({t_next})")
    if t_next < -1:
        raise StepRangeError(f"t_next ({t_next}) below -1")
    ab_now = schedule.at(t_now)
    ab_next = schedule.at(t_next)
    if ab_now >= 1.0:
        if _any_nonzero(x_t - x0_hat):
            raise NumericError(f"alpha_bar at step {t_now} is 1; noise estimate is undefined")
        return x0_hat
    eps_hat = (x_t - math.sqrt(ab_now) * x0_hat) / math.sqrt(1.0 - ab_now)
    return math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat


def _any_nonzero(d) -> bool:
    if isinstance(d, torch.Tensor):
        return bool((d != 0).any())
    return bool(np.any(np.asarray(d) != 0))
