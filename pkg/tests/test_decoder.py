import pytest
import torch

from diffpose.config import ModelConfig
from diffpose.decoder import HighLevelInteraction, LowLevelInteraction, PoseDecoder, sinusoidal_embedding
from diffpose.errors import ShapeError, StepRangeError


@pytest.fixture
def cfg():
    return ModelConfig()


@pytest.fixture
def dec(cfg):
    torch.manual_seed(0)
    return PoseDecoder(cfg, 1000).eval()


def test_rescale_identity_at_init(dec):
    x = torch.randn(3, 8, 16, 12)
    for t in (0, 17, 999):
        assert torch.equal(dec.embed_step_and_rescale(x, torch.full((3,), t)), x)


def test_step_embeddings_distinct():
    emb = sinusoidal_embedding(torch.arange(1001), 64)
    assert len(torch.unique(emb, dim=0)) == 1001


def test_rescale_keeps_constant_maps_constant(dec):
    for p in dec.step.parameters():
        torch.nn.init.normal_(p, std=0.5)
    x = torch.full((2, 8, 16, 12), 0.3)
    out = dec.embed_step_and_rescale(x, torch.tensor([5, 900]))
    assert torch.all(out == out[..., :1, :1])


def test_step_out_of_range(dec):
    with pytest.raises(StepRangeError):
        dec.embed_step_and_rescale(torch.zeros(1, 8, 16, 12), torch.tensor([1001]))


def test_pyramid_shapes(dec):
    cond = torch.randn(1, 64, 4, 3)
    x = torch.randn(1, 8, 16, 12)
    (f1, f2, f3), (x1, x2, x3) = dec.build_pyramids(cond, x)
    assert f1.shape[-2:] == (4, 3) and f2.shape[-2:] == (8, 6) and f3.shape[-2:] == (16, 12)
    assert x1.shape[-2:] == (4, 3) and x2.shape[-2:] == (8, 6)
    assert x3 is x and torch.max(torch.abs(x3 - x)) == 0


def test_pyramid_size_mismatch(dec):
    with pytest.raises(ShapeError):
        dec.build_pyramids(torch.randn(1, 64, 4, 3), torch.randn(1, 8, 12, 12))


def test_masks_in_open_unit_interval(dec):
    _, masks = dec(torch.randn(2, 8, 16, 12) * 5, torch.randn(2, 64, 4, 3), torch.tensor([3, 700]),
                   return_masks=True)
    for a in masks:
        assert a.shape[1] == 1
        assert torch.all((a > 0) & (a < 1))


def test_spatially_uniform_heatmap_gives_scalar_mask():
    torch.manual_seed(2)
    lvl = LowLevelInteraction(4, 8, 4, 2)
    hm = torch.randn(1, 4, 1, 1).expand(1, 4, 4, 3).contiguous()  # constant over space
    with torch.no_grad():
        a = lvl.mask(hm)
    c = a.flatten()[0]
    assert torch.allclose(a, torch.full_like(a, float(c)), atol=1e-6)
    assert 0 < c < 1
    feat = torch.randn(1, 8, 4, 3)
    assert torch.allclose(a * feat, c * feat, atol=1e-6)


def test_zeroed_mask_site_zeroes_all_channels():
    torch.manual_seed(1)
    feat = torch.randn(1, 6, 5, 4)
    a = torch.rand(1, 1, 5, 4)
    a[0, 0, 2, 1] = 0.0
    out = a * feat
    assert torch.all(out[0, :, 2, 1] == 0)
    # locality: changing the mask elsewhere leaves this site untouched
    b = a.clone()
    b[0, 0, 0, 0] = 0.9
    assert torch.equal((b * feat)[0, :, 2, 1], out[0, :, 2, 1])


def test_zero_refinement_zero_input_gives_half_mask():
    lvl = HighLevelInteraction(4, 8, 4, upsample=True)
    for p in lvl.refine.parameters():
        torch.nn.init.zeros_(p)
    a = lvl.mask(torch.zeros(1, 4, 8, 6))
    assert torch.all(a == 0.5)


def test_level_outputs_share_resolution(dec):
    cond = torch.randn(1, 64, 4, 3)
    (f1, f2, f3), (x1, x2, x3) = dec.build_pyramids(cond, torch.randn(1, 8, 16, 12))
    outs = [dec.level1(f1, x1), dec.level2(f2, x2), dec.level3(f3, x3)]
    assert all(o.shape == (1, 16, 16, 12) for o in outs)


def test_level_size_mismatch(dec):
    with pytest.raises(ShapeError):
        dec.level2(torch.randn(1, 32, 8, 6), torch.randn(1, 16, 4, 3))


def test_fuse_two_zero_levels(dec):
    z = torch.zeros(1, 16, 16, 12)
    third = torch.randn(1, 16, 16, 12)
    assert torch.equal(dec.fuse_and_head((z, z, third)), dec.head(third))


def test_fuse_order_invariant(dec):
    levels = [torch.randn(1, 16, 16, 12) for _ in range(3)]
    a = dec.fuse_and_head(levels)
    b = dec.fuse_and_head(levels[::-1])
    assert torch.allclose(a, b, atol=1e-6)


def test_fuse_shape_mismatch(dec):
    with pytest.raises(ShapeError):
        dec.fuse_and_head((torch.zeros(1, 16, 16, 12), torch.zeros(1, 16, 8, 6), torch.zeros(1, 16, 16, 12)))


def test_decoder_output_shape_and_determinism(dec):
    x = torch.randn(2, 8, 16, 12)
    cond = torch.randn(2, 64, 4, 3)
    t = torch.tensor([10, 500])
    with torch.no_grad():
        a = dec(x, cond, t)
        b = dec(x, cond, t)
    assert a.shape == (2, 8, 16, 12)
    assert torch.equal(a, b)


# ------------------------------------------------------------ finite differences

GRAD_CFG = ModelConfig(
    num_joints=2, image_size=(16, 16), patch_size=8, embed_dim=8, num_heads=2,
    cond_channels=6, level_channels=(4, 4, 3), heatmap_hidden=3, fused_channels=3,
    step_embed_dim=8, frame_layers=1, temporal_layers=1, delta=0,
)


def _central_difference(loss_fn, tensor: torch.Tensor, h: float) -> torch.Tensor:
    g = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-7) -> float:
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
    return float(((analytic - numeric).abs() / denom).max())


def gradient_check(seed: int = 0, h: float = 1e-4):
    """Analytic vs central-difference gradients of the decoder MSE, in float64.

    Heatmap 8x8 on a 2x2 condition (K=2); every decoder parameter and both inputs.
    """
    torch.manual_seed(seed)
    dec = PoseDecoder(GRAD_CFG, 1000).double()
    with torch.no_grad():
        for p in dec.parameters():  # move zero-initialised heads off their identity point
            p.add_(0.1 * torch.randn_like(p))
    x_t = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    cond = torch.randn(1, 6, 2, 2, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    t = torch.tensor([321])

    def loss():
        return torch.mean((dec(x_t, cond, t) - target) ** 2)

    dec.zero_grad()
    loss().backward()
    tensors = [(n, p) for n, p in dec.named_parameters()] + [("x_t", x_t), ("cond", cond)]
    worst = {}
    with torch.no_grad():
        for name, p in tensors:
            numeric = _central_difference(lambda: float(loss()), p, h)
            worst[name] = max_relative_error(p.grad, numeric)
    return worst


def test_finite_difference_gradients():
    worst = gradient_check()
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, bad
