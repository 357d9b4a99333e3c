"""Spatiotemporal representation learner: per-frame patch transformer + temporal fusion."""
from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigError, ShapeError


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    """Pre-norm encoder layer: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class FrameEncoder(nn.Module):
    """Patch embedding followed by a small transformer stack, applied to each frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim, cfg.patch_size, cfg.patch_size)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.frame_layers)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images -> (B, tokens, D)."""
        h, w = frames.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"frame {h}x{w} not divisible by patch size {self.patch_size}")
        x = self.embed(frames).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class STRL(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gh, gw = cfg.token_grid
        self.grid = (gh, gw)
        self.num_frames = cfg.num_frames
        self.frame_encoder = FrameEncoder(cfg)
        self.token_embed = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        # one row per (frame, token)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_frames, gh * gw, cfg.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.temporal_layers)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.GELU(),
            nn.Linear(cfg.embed_dim, cfg.cond_channels),
        )

    def extract_frame_features(self, clip: torch.Tensor) -> torch.Tensor:
        """(B, F, C, H, W) clip -> (B, F, tokens, D) per-frame features."""
        b, f = clip.shape[:2]
        feats = self.frame_encoder(clip.flatten(0, 1))
        return feats.reshape(b, f, *feats.shape[1:])

    def fuse_temporal(self, feats: torch.Tensor, return_layers: bool = False):
        """(B, F, tokens, D) -> (B, C, gh, gw) condition.

        Output tokens are averaged over the F temporal copies of each spatial site.
        """
        b, f, n, d = feats.shape
        if f != self.num_frames:
            raise ConfigError(f"expected {self.num_frames} frames (2*delta+1), got {f}")
        x = (self.token_embed(feats) + self.pos_embed).reshape(b, f * n, d)
        layers = [x]
        for blk in self.blocks:
            x = blk(x)
            layers.append(x)
        y = self.mlp(self.norm(x)).reshape(b, f, n, -1).mean(dim=1)
        cond = y.transpose(1, 2).reshape(b, -1, *self.grid)
        return (cond, layers) if return_layers else cond

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        if clip.dim() != 5:
            raise ShapeError(f"clip must be (B, F, C, H, W), got {tuple(clip.shape)}")
        return self.fuse_temporal(self.extract_frame_features(clip))
