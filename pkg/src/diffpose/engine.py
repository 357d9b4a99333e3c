"""Training (x0-prediction with random steps) and few-step DDIM inference with ensembling."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import InferenceOptions, RunConfig
from .diffusion import (NoiseSchedule, build_cosine_schedule, ddim_step, forward_diffuse_batch,
                        make_sampling_plan)
from .errors import ConfigError, NumericError
from .heatmap import (CodecConfig, KeypointSet, decode_batch, denormalize_from_diffusion,
                      encode_batch, normalize_for_diffusion)
from .metrics import DEFAULT_THRESHOLDS, MetricReport, evaluate
from .model import Checkpoint, DiffPoseNet, build_model, make_optimizer, save_checkpoint
from .synthetic import JOINT_NAMES, Clip, flip_pairs_for

log = logging.getLogger(__name__)


def configure_threads() -> int:
    """Apply ``DIFFPOSE_THREADS``; 1 forces the serial, bit-reproducible mode."""
    raw = os.environ.get("DIFFPOSE_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError("DIFFPOSE_THREADS must be an integer") from exc
        if n < 1:
            raise ConfigError("DIFFPOSE_THREADS must be >= 1")
        torch.set_num_threads(n)
    return torch.get_num_threads()


def codec_for(run: RunConfig) -> CodecConfig:
    m = run.model
    return CodecConfig(
        num_joints=m.num_joints, resolution=m.heatmap_size, sigma=m.sigma,
        signal_scale=run.train.signal_scale, flip_pairs=flip_pairs_for(m.num_joints),
    )


@dataclass
class TrainingData:
    clips: torch.Tensor  # (N, F, 3, H, W)
    x0: torch.Tensor  # (N, K, Hh, Wh), diffusion domain

    def __len__(self):
        return len(self.clips)


def prepare_data(clips: Sequence[Clip], run: RunConfig) -> TrainingData:
    if not clips:
        raise ConfigError("dataset is empty")
    m = run.model
    frames = np.stack([c.tensor(m.delta) for c in clips])
    if frames.shape[-2:] != m.image_size:
        raise ConfigError(f"clip frames {frames.shape[-2:]} do not match model image size {m.image_size}")
    kps = [c.keyframe.scaled(m.stride) for c in clips]
    codec = codec_for(run)
    hm = encode_batch(np.stack([k.xy for k in kps]), np.stack([k.visible for k in kps]), codec)
    return TrainingData(torch.from_numpy(frames), normalize_for_diffusion(torch.from_numpy(hm), codec))


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(pred, target)


def train_step(model: DiffPoseNet, optimizer: torch.optim.Optimizer, clips: torch.Tensor,
               x0: torch.Tensor, schedule: NoiseSchedule, gen: torch.Generator) -> float:
    b = len(x0)
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = forward_diffuse_batch(x0, t, eps, schedule)
    loss = mse_loss(model(clips, x_t, t), x0)
    if not torch.isfinite(loss):
        ab = [round(schedule.at(int(s)), 8) for s in t]
        raise NumericError(f"non-finite loss {loss.item()} at steps t={t.tolist()} alpha_bar={ab}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


@torch.no_grad()
def evaluate_loss(model: DiffPoseNet, data: TrainingData, schedule: NoiseSchedule,
                  seed: int = 12345, repeats: int = 4) -> float:
    """Denoising MSE at a fixed, seeded set of steps and noises (comparable across training)."""
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(repeats):
        t = torch.randint(1, schedule.T + 1, (len(data),), generator=gen)
        eps = torch.randn(data.x0.shape, generator=gen)
        pred = model(data.clips, forward_diffuse_batch(data.x0, t, eps, schedule), t)
        total += float(mse_loss(pred, data.x0))
    return total / repeats


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[tuple[int, int, float, float]] = field(default_factory=list)  # epoch, step, lr, loss


def write_loss_csv(rows: Iterable[tuple[int, int, float, float]], path: str | os.PathLike):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "lr", "loss"])
        for epoch, step, lr, loss in rows:
            w.writerow([epoch, step, f"{lr:.6e}", f"{loss:.9e}"])


def train(data: TrainingData | Sequence[Clip], run: RunConfig, out_dir: str | os.PathLike | None = None,
          callback: Callable[[int, int, float], None] | None = None,
          checkpoint_every: int = 1) -> TrainResult:
    """Shuffled mini-batch training; lr x0.1 at each decay epoch; a checkpoint per epoch."""
    configure_threads()
    if not isinstance(data, TrainingData):
        data = prepare_data(data, run)
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    tc = run.train
    schedule = build_cosine_schedule(tc.T)
    model = build_model(run)
    optimizer = make_optimizer(model, run)
    gen = torch.Generator().manual_seed(tc.seed)
    order_rng = np.random.default_rng(tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows = []
    step = 0
    ckpt = Checkpoint(model, run, 0, optimizer)
    model.train()
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = order_rng.permutation(len(data))
        for start in range(0, len(perm), tc.batch_size):
            idx = torch.from_numpy(perm[start:start + tc.batch_size])
            loss = train_step(model, optimizer, data.clips[idx], data.x0[idx], schedule, gen)
            rows.append((epoch, step, lr, loss))
            if callback is not None:
                callback(epoch, step, loss)
            step += 1
            if tc.max_steps and step >= tc.max_steps:
                break
        ckpt.epoch = epoch + 1
        if out is not None and (ckpt.epoch % checkpoint_every == 0 or ckpt.epoch == tc.epochs):
            save_checkpoint(out / "checkpoints" / f"epoch_{ckpt.epoch:03d}", ckpt)
            write_loss_csv(rows, out / "loss.csv")
        log.info("epoch %d lr %.2e mean loss %.5f", epoch, lr,
                 np.mean([r[3] for r in rows if r[0] == epoch]))
        if tc.max_steps and step >= tc.max_steps:
            break
    model.eval()
    if out is not None:
        write_loss_csv(rows, out / "loss.csv")
        save_checkpoint(out / "checkpoints" / "last", ckpt)
    return TrainResult(ckpt, rows)


# ---------------------------------------------------------------- inference


def draw_noise(seed: int, clip_ids: Sequence[int], groups: int | Sequence[int],
               shape: tuple[int, ...]) -> torch.Tensor:
    """Standard-normal starts, (G, B, *shape); group g of clip c depends only on (seed, c, g)."""
    group_ids = range(groups) if isinstance(groups, int) else groups
    out = np.empty((len(group_ids), len(clip_ids), *shape), dtype=np.float32)
    for gi, g in enumerate(group_ids):
        for ci, c in enumerate(clip_ids):
            out[gi, ci] = np.random.default_rng([seed, int(c), int(g)]).standard_normal(shape, dtype=np.float32)
    return torch.from_numpy(out)


@torch.no_grad()
def denoise_group(model: DiffPoseNet, cond: torch.Tensor, x_T: torch.Tensor, schedule: NoiseSchedule,
                  steps: int, signal_scale: float) -> torch.Tensor:
    """Run the DDIM chain for one noise group; returns the last x0 estimate (diffusion domain)."""
    x = x_T
    x0 = x_T
    for t_now, t_next in make_sampling_plan(schedule.T, steps):
        t = torch.full((len(x),), t_now, dtype=torch.long)
        x0 = model.denoise(x, cond, t).clamp(-signal_scale, signal_scale)
        if t_next >= 0:  # the final jump to a clean signal would just return x0
            x = ddim_step(x, x0, t_now, t_next, schedule)
    return x0


def ensemble_mean(heatmaps: torch.Tensor) -> torch.Tensor:
    """Mean over dim 0, independent of the order of the groups (sorted float64 summation)."""
    vals, _ = torch.sort(heatmaps.to(torch.float64), dim=0)
    return (vals.sum(dim=0) / heatmaps.shape[0]).to(heatmaps.dtype)


@torch.no_grad()
def sample_pose(model: DiffPoseNet, cond: torch.Tensor, schedule: NoiseSchedule,
                opts: InferenceOptions, codec: CodecConfig, noise: torch.Tensor | None = None,
                clip_ids: Sequence[int] | None = None, return_groups: bool = False):
    """Average of N denoised heatmaps in [0, amplitude], shape (B, K, H, W).

    ``noise`` (N, B, K, H, W) overrides the seeded draw from ``(opts.seed, clip_id, group)``.
    """
    if schedule.T != model.T:
        raise ConfigError(f"schedule T={schedule.T} but model was trained with T={model.T}")
    b = len(cond)
    if noise is None:
        ids = list(range(b)) if clip_ids is None else list(clip_ids)
        noise = draw_noise(opts.seed, ids, opts.N, (codec.num_joints, *codec.resolution))
    groups = []
    for x_T in noise:
        x0 = denoise_group(model, cond, x_T, schedule, opts.steps, codec.signal_scale)
        groups.append(denormalize_from_diffusion(x0, codec))
    stacked = torch.stack(groups)
    mean = ensemble_mean(stacked)
    return (mean, stacked) if return_groups else mean


def decode_predictions(heatmaps: torch.Tensor, codec: CodecConfig, stride: float) -> list[KeypointSet]:
    """Heatmaps (B, K, H, W) -> keypoints in image pixels."""
    xy, vis, _ = decode_batch(heatmaps.numpy(), codec.visibility_threshold * codec.amplitude)
    return [KeypointSet(xy[i], vis[i]).scaled(1.0 / stride) for i in range(len(xy))]


def _check_clip(clip: torch.Tensor, run: RunConfig):
    m = run.model
    if clip.dim() != 5 or clip.shape[1] != m.num_frames or tuple(clip.shape[-2:]) != m.image_size:
        raise ConfigError(
            f"clip tensor {tuple(clip.shape)} does not match checkpoint "
            f"(frames={m.num_frames}, image={m.image_size})"
        )


@torch.no_grad()
def predict_keypoints(clip, checkpoint: Checkpoint, opts: InferenceOptions,
                      clip_ids: Sequence[int] | None = None) -> list[KeypointSet]:
    """STRL -> ensemble sampling -> argmax decoding; coordinates on the heatmap grid."""
    run = checkpoint.config
    clip = torch.as_tensor(clip)
    if clip.dim() == 4:
        clip = clip[None]
    _check_clip(clip, run)
    model = checkpoint.model.eval()
    codec = codec_for(run)
    schedule = build_cosine_schedule(run.train.T)
    cond = model.condition(clip)
    hm = sample_pose(model, cond, schedule, opts, codec, clip_ids=clip_ids)
    xy, vis, _ = decode_batch(hm.numpy(), codec.visibility_threshold * codec.amplitude)
    return [KeypointSet(xy[i], vis[i]) for i in range(len(xy))]


@dataclass
class ClipPredictions:
    keypoints: list[KeypointSet]  # image pixels
    peaks: np.ndarray  # (B, K)


@torch.no_grad()
def predict_clips(checkpoint: Checkpoint, clips: Sequence[Clip], opts: InferenceOptions,
                  batch_size: int = 64) -> ClipPredictions:
    run = checkpoint.config
    codec = codec_for(run)
    schedule = build_cosine_schedule(run.train.T)
    model = checkpoint.model.eval()
    kps, peaks = [], []
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        x = torch.from_numpy(np.stack([c.tensor(run.model.delta) for c in chunk]))
        _check_clip(x, run)
        hm = sample_pose(model, model.condition(x), schedule, opts, codec,
                         clip_ids=[c.clip_id for c in chunk])
        xy, vis, pk = decode_batch(hm.numpy(), codec.visibility_threshold * codec.amplitude)
        kps += [KeypointSet(xy[i], vis[i]).scaled(1.0 / run.model.stride) for i in range(len(xy))]
        peaks.append(pk)
    return ClipPredictions(kps, np.concatenate(peaks))


def evaluate_predictions(preds: Sequence[KeypointSet], clips: Sequence[Clip],
                         thresholds=DEFAULT_THRESHOLDS, config: dict | None = None) -> MetricReport:
    k = clips[0].keyframe.num_joints
    return evaluate(preds, [c.keyframe for c in clips], [c.bbox for c in clips], thresholds,
                    JOINT_NAMES[:k], config)


@torch.no_grad()
def ablation_grid(checkpoint: Checkpoint, clips: Sequence[Clip], Ns: Sequence[int] = (1, 5, 10),
                  steps_list: Sequence[int] = (1, 2, 4), seed: int = 0, batch_size: int = 64,
                  thresholds=DEFAULT_THRESHOLDS) -> list[dict]:
    """PCK for every (N, steps) pair; ensembles of size N reuse groups 0..N-1."""
    run = checkpoint.config
    codec = codec_for(run)
    schedule = build_cosine_schedule(run.train.T)
    model = checkpoint.model.eval()
    n_max = max(Ns)
    per_steps: dict[int, torch.Tensor] = {s: [] for s in steps_list}
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        x = torch.from_numpy(np.stack([c.tensor(run.model.delta) for c in chunk]))
        _check_clip(x, run)
        cond = model.condition(x)
        noise = draw_noise(seed, [c.clip_id for c in chunk], n_max, (codec.num_joints, *codec.resolution))
        for s in steps_list:
            groups = torch.stack([
                denormalize_from_diffusion(
                    denoise_group(model, cond, x_T, schedule, s, codec.signal_scale), codec)
                for x_T in noise
            ])
            per_steps[s].append(groups)
    rows = []
    hard = np.array([c.hard for c in clips])
    for n in Ns:
        for s in steps_list:
            hm = ensemble_mean(torch.cat(per_steps[s], dim=1)[:n])
            preds = decode_predictions(hm, codec, run.model.stride)
            row = {"N": n, "steps": s}
            for subset, mask in (("all", np.ones(len(clips), bool)), ("hard", hard), ("easy", ~hard)):
                idx = np.flatnonzero(mask)
                if len(idx) == 0:
                    for r in thresholds:
                        row[f"{subset}_pck@{r:g}"] = None
                    continue
                rep = evaluate_predictions([preds[i] for i in idx], [clips[i] for i in idx], thresholds)
                for r in thresholds:
                    row[f"{subset}_pck@{r:g}"] = rep.mean[r]
            row["num_hard"] = int(hard.sum())
            row["num_clips"] = len(clips)
            rows.append(row)
    return rows
