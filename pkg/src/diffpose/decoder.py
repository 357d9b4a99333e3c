"""Pose-Decoder: the x0-predicting denoiser f(x_t, condition, t).

Step conditioning rescales the noisy heatmap, a three-level size-matched pyramid
pairs condition features with heatmap features, and each level retrieves
condition features through a sigmoid mask squeezed from the heatmap branch.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig
from .errors import ShapeError, StepRangeError
from .strl import TransformerBlock


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class StepRescale(nn.Module):
    """x_bar = x * (1 + scale(t)) + shift(t), per heatmap channel."""

    def __init__(self, num_channels: int, embed_dim: int, T: int):
        super().__init__()
        self.T = T
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, 2 * embed_dim), nn.SiLU(),
            nn.Linear(2 * embed_dim, 2 * num_channels),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if t.min() < 0 or t.max() > self.T:
            raise StepRangeError(f"step outside [0, {self.T}]")
        emb = sinusoidal_embedding(t, self.embed_dim).to(x.dtype)
        scale, shift = self.mlp(emb).chunk(2, dim=-1)
        return x * (1 + scale[..., None, None]) + shift[..., None, None]


def _check_pair(feat: torch.Tensor, hm: torch.Tensor):
    if feat.shape[-2:] != hm.shape[-2:]:
        raise ShapeError(
            f"feature {tuple(feat.shape[-2:])} and heatmap {tuple(hm.shape[-2:])} are not size-matched"
        )


def squeeze_mask(refined: torch.Tensor) -> torch.Tensor:
    """Channel-wise max then sigmoid: (B, C, h, w) -> (B, 1, h, w) in (0, 1)."""
    return torch.sigmoid(refined.amax(dim=1, keepdim=True))


class LowLevelInteraction(nn.Module):
    """Level 1: transformer self-refinement of heatmap tokens, transformer fusion."""

    def __init__(self, hm_channels: int, channels: int, out_channels: int, num_heads: int,
                 num_blocks: int = 1):
        super().__init__()
        self.tokenize = nn.Linear(hm_channels, channels)
        self.refine = TransformerBlock(channels, num_heads)
        self.fuse_in = nn.Linear(2 * channels, channels)
        self.fuse = nn.ModuleList(TransformerBlock(channels, num_heads) for _ in range(num_blocks))
        self.up = nn.Sequential(
            nn.ConvTranspose2d(channels, out_channels, 4, 2, 1), nn.GELU(),
            nn.ConvTranspose2d(out_channels, out_channels, 4, 2, 1),
        )

    def mask(self, hm: torch.Tensor) -> torch.Tensor:
        b, _, h, w = hm.shape
        tokens = self.refine(self.tokenize(hm.flatten(2).transpose(1, 2)))
        refined = tokens.transpose(1, 2).reshape(b, -1, h, w)
        return squeeze_mask(refined)

    def forward(self, feat: torch.Tensor, hm: torch.Tensor, return_mask: bool = False):
        _check_pair(feat, hm)
        b, c, h, w = feat.shape
        a = self.mask(hm)
        retrieved = a * feat
        x = torch.cat([retrieved, feat], dim=1).flatten(2).transpose(1, 2)
        x = self.fuse_in(x)
        for blk in self.fuse:
            x = blk(x)
        out = self.up(x.transpose(1, 2).reshape(b, c, h, w))
        return (out, a) if return_mask else out


class HighLevelInteraction(nn.Module):
    """Levels 2 and 3: the same lookup, with convolutional refinement and fusion."""

    def __init__(self, hm_channels: int, channels: int, out_channels: int, upsample: bool):
        super().__init__()
        self.refine = nn.Sequential(
            nn.Conv2d(hm_channels, channels, 3, 1, 1), nn.GELU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
        )
        self.fuse = nn.Sequential(nn.Conv2d(2 * channels, channels, 3, 1, 1), nn.GELU())
        if upsample:
            self.up = nn.ConvTranspose2d(channels, out_channels, 4, 2, 1)
        else:
            self.up = nn.Conv2d(channels, out_channels, 1)  # 1x "upsample" for channel alignment

    def mask(self, hm: torch.Tensor) -> torch.Tensor:
        return squeeze_mask(self.refine(hm))

    def forward(self, feat: torch.Tensor, hm: torch.Tensor, return_mask: bool = False):
        _check_pair(feat, hm)
        a = self.mask(hm)
        out = self.up(self.fuse(torch.cat([a * feat, feat], dim=1)))
        return (out, a) if return_mask else out


class PoseDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, T: int):
        super().__init__()
        k = cfg.num_joints
        c = cfg.cond_channels
        c1, c2, c3 = cfg.level_channels
        hx = cfg.heatmap_hidden
        out = cfg.fused_channels
        self.num_joints = k
        self.step = StepRescale(k, cfg.step_embed_dim, T)
        # condition pyramid: 1x, 2x, 4x
        self.cond_up1 = nn.ConvTranspose2d(c, c1, 3, 1, 1)
        self.cond_up2 = nn.ConvTranspose2d(c, c2, 4, 2, 1)
        self.cond_up3 = nn.Sequential(
            nn.ConvTranspose2d(c, c3, 4, 2, 1), nn.GELU(), nn.ConvTranspose2d(c3, c3, 4, 2, 1),
        )
        # heatmap pyramid: 4x (identity), 2x, 1x
        self.hm_down2 = nn.Conv2d(k, hx, 3, 2, 1)
        self.hm_down1 = nn.Conv2d(hx, hx, 3, 2, 1)
        self.level1 = LowLevelInteraction(hx, c1, out, cfg.num_heads)
        self.level2 = HighLevelInteraction(hx, c2, out, upsample=True)
        self.level3 = HighLevelInteraction(k, c3, out, upsample=False)
        self.head = nn.Conv2d(out, k, 3, 1, 1)

    def embed_step_and_rescale(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.step(x_t, t)

    def build_pyramids(self, cond: torch.Tensor, x_bar: torch.Tensor):
        h, w = cond.shape[-2:]
        if x_bar.shape[-2:] != (4 * h, 4 * w):
            raise ShapeError(
                f"heatmap {tuple(x_bar.shape[-2:])} must be 4x the condition {(h, w)}"
            )
        feats = (self.cond_up1(cond), self.cond_up2(cond), self.cond_up3(cond))
        x2 = self.hm_down2(x_bar)
        x1 = self.hm_down1(x2)
        return feats, (x1, x2, x_bar)

    def fuse_and_head(self, levels) -> torch.Tensor:
        shape = levels[0].shape
        if any(lv.shape != shape for lv in levels):
            raise ShapeError("pyramid outputs do not share a shape")
        return self.head(sum(levels))

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
                return_masks: bool = False):
        if x_t.dim() != 4 or x_t.shape[1] != self.num_joints:
            raise ShapeError(f"x_t must be (B, {self.num_joints}, H, W), got {tuple(x_t.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        x_bar = self.embed_step_and_rescale(x_t, t)
        (f1, f2, f3), (x1, x2, x3) = self.build_pyramids(cond, x_bar)
        o1, a1 = self.level1(f1, x1, return_mask=True)
        o2, a2 = self.level2(f2, x2, return_mask=True)
        o3, a3 = self.level3(f3, x3, return_mask=True)
        out = self.fuse_and_head((o1, o2, o3))
        return (out, (a1, a2, a3)) if return_masks else out
