import pytest
import torch

from diffpose.config import ModelConfig
from diffpose.errors import ConfigError, ShapeError
from diffpose.strl import STRL, FrameEncoder


def test_token_count_64x48_patch16():
    enc = FrameEncoder(ModelConfig())
    out = enc(torch.zeros(2, 3, 64, 48))
    assert out.shape == (2, 12, 64)


def test_non_divisible_frame_rejected():
    enc = FrameEncoder(ModelConfig())
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 3, 60, 48))


def test_zero_image_zero_bias_gives_identical_tokens():
    enc = FrameEncoder(ModelConfig())
    torch.nn.init.zeros_(enc.embed.bias)
    out = enc(torch.zeros(1, 3, 64, 48))[0]
    assert torch.allclose(out, out[0].expand_as(out), atol=1e-6)


def test_pixel_change_moves_its_patch_embedding():
    enc = FrameEncoder(ModelConfig())
    x = torch.rand(1, 3, 64, 48)
    base = enc.embed(x).flatten(2)[0, :, :]
    y = x.clone()
    y[0, 1, 20, 40] += 0.5  # row 20, col 40 -> patch (1, 2) -> token 5
    moved = enc.embed(y).flatten(2)[0]
    changed = (moved - base).abs().amax(dim=0) > 0
    assert changed[1 * 3 + 2]
    assert changed.sum() == 1


def test_condition_shape_and_layer_widths(tiny_model_cfg):
    m = STRL(tiny_model_cfg)
    clip = torch.rand(2, tiny_model_cfg.num_frames, 3, 32, 16)
    feats = m.extract_frame_features(clip)
    cond, layers = m.fuse_temporal(feats, return_layers=True)
    assert cond.shape == (2, tiny_model_cfg.cond_channels, 4, 2)
    assert len({tuple(l.shape) for l in layers}) == 1
    assert torch.isfinite(cond).all()


def test_wrong_frame_count(tiny_model_cfg):
    m = STRL(tiny_model_cfg)
    feats = m.extract_frame_features(torch.rand(1, 5, 3, 32, 16))
    with pytest.raises(ConfigError):
        m.fuse_temporal(feats)


def test_single_frame_window():
    cfg = ModelConfig(delta=0)
    m = STRL(cfg)
    assert m(torch.rand(1, 1, 3, 64, 48)).shape == (1, 64, 4, 3)


def test_swap_frames_with_position_rows_is_invariant():
    torch.manual_seed(3)
    cfg = ModelConfig(delta=2)
    m = STRL(cfg).eval()
    feats = m.extract_frame_features(torch.rand(2, 5, 3, 64, 48))
    with torch.no_grad():
        ref = m.fuse_temporal(feats)
        perm = [0, 3, 2, 1, 4]
        m.pos_embed.copy_(m.pos_embed[perm])
        out = m.fuse_temporal(feats[:, perm])
    assert torch.max(torch.abs(out - ref)) <= 1e-5


def test_forward_deterministic(tiny_model_cfg):
    m = STRL(tiny_model_cfg).eval()
    clip = torch.rand(1, 3, 3, 32, 16)
    with torch.no_grad():
        assert torch.equal(m(clip), m(clip))
