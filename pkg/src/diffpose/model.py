"""The full network (STRL + Pose-Decoder) and bit-exact checkpoint persistence."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, RunConfig, from_flat
from .decoder import PoseDecoder
from .errors import ConfigError
from .strl import STRL

CHECKPOINT_FORMAT = "diffpose-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "tensors.f32"


class DiffPoseNet(nn.Module):
    def __init__(self, cfg: ModelConfig, T: int):
        super().__init__()
        self.cfg = cfg
        self.T = T
        self.strl = STRL(cfg)
        self.decoder = PoseDecoder(cfg, T)

    def condition(self, clip: torch.Tensor) -> torch.Tensor:
        return self.strl(clip)

    def denoise(self, x_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
        return self.decoder(x_t, cond, t)

    def forward(self, clip: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        return self.decoder(x_t, self.strl(clip), t)


def build_model(run: RunConfig, seed: int | None = None) -> DiffPoseNet:
    torch.manual_seed(run.train.seed if seed is None else seed)
    return DiffPoseNet(run.model, run.train.T)


def make_optimizer(model: nn.Module, run: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=run.train.base_lr, betas=tuple(run.train.betas),
        weight_decay=run.train.weight_decay,
    )


@dataclass
class Checkpoint:
    model: DiffPoseNet
    config: RunConfig
    epoch: int = 0
    optimizer: torch.optim.Optimizer | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def save(self, path: str | os.PathLike) -> Path:
        return save_checkpoint(path, self)


def _state_tensors(ckpt: Checkpoint) -> tuple[list[tuple[str, np.ndarray]], dict[str, int]]:
    tensors = [(f"model/{k}", v.detach().cpu().numpy()) for k, v in ckpt.model.state_dict().items()]
    steps: dict[str, int] = {}
    if ckpt.optimizer is not None:
        names = {id(p): n for n, p in ckpt.model.named_parameters()}
        for group in ckpt.optimizer.param_groups:
            for p in group["params"]:
                state = ckpt.optimizer.state.get(p)
                if not state:
                    continue
                name = names[id(p)]
                tensors.append((f"optim/{name}/exp_avg", state["exp_avg"].cpu().numpy()))
                tensors.append((f"optim/{name}/exp_avg_sq", state["exp_avg_sq"].cpu().numpy()))
                steps[name] = int(state["step"])
    return tensors, steps


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors, steps = _state_tensors(ckpt)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    lr = ckpt.optimizer.param_groups[0]["lr"] if ckpt.optimizer is not None else None
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float32",
        "byteorder": "little",
        "blob": BLOB,
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_flat(),
        "optimizer": {"lr": lr, "steps": steps} if ckpt.optimizer is not None else None,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    (out / BLOB).write_bytes(b"".join(chunks))
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path: str | os.PathLike, with_optimizer: bool = True) -> Checkpoint:
    src = Path(path)
    try:
        manifest = json.loads((src / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint manifest in {src}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{src}: unsupported checkpoint format {manifest.get('format')!r}")
    run = from_flat(manifest["config"], env=False)
    blob = (src / manifest["blob"]).read_bytes()
    arrays = {
        e["name"]: np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                                 offset=e["offset"]).reshape(e["shape"])
        for e in manifest["tensors"]
    }
    model = DiffPoseNet(run.model, run.train.T)
    state = {}
    for k, ref in model.state_dict().items():
        key = f"model/{k}"
        if key not in arrays:
            raise ConfigError(f"{src}: tensor {key} missing from checkpoint")
        if tuple(arrays[key].shape) != tuple(ref.shape):
            raise ConfigError(f"{src}: tensor {key} has shape {arrays[key].shape}, model expects {tuple(ref.shape)}")
        state[k] = torch.from_numpy(arrays[key].astype(np.float32))
    model.load_state_dict(state)

    optimizer = None
    opt_meta = manifest.get("optimizer")
    if with_optimizer and opt_meta is not None:
        optimizer = make_optimizer(model, run)
        for group in optimizer.param_groups:
            group["lr"] = opt_meta["lr"]
        for name, p in model.named_parameters():
            if name not in opt_meta["steps"]:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(opt_meta["steps"][name])),
                "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].astype(np.float32)),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].astype(np.float32)),
            }
    return Checkpoint(model, run, manifest["epoch"], optimizer, manifest.get("extra") or {})
