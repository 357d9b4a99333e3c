from dataclasses import replace

import numpy as np
import pytest
import torch

from diffpose import engine
from diffpose.config import InferenceOptions, from_flat
from diffpose.diffusion import build_cosine_schedule
from diffpose.errors import ConfigError, NumericError
from diffpose.model import load_checkpoint, save_checkpoint
from diffpose.synthetic import generate_dataset

from conftest import TINY


def tiny(**over):
    return from_flat({**TINY, "batch_size": 4, "epochs": 2, **over}, env=False)


@pytest.fixture(scope="module")
def clips():
    return generate_dataset(tiny().scene, 6, seed=5)


@pytest.fixture(scope="module")
def trained(clips):
    return engine.train(clips, tiny())


def test_mse_zero_and_hand_case():
    x = torch.randn(3, 4)
    assert engine.mse_loss(x, x) == 0
    assert engine.mse_loss(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 0.0])) == 0.5


def test_lr_decay():
    tc = tiny(base_lr=5e-4, lr_decay_epochs=[3, 6]).train
    assert tc.lr_at(0) == 5e-4 and tc.lr_at(2) == 5e-4
    assert tc.lr_at(3) == pytest.approx(5e-5)
    assert tc.lr_at(6) == pytest.approx(5e-6)


def test_default_base_lr():
    assert from_flat({}, env=False).train.base_lr == 5e-4


def test_loss_trace_deterministic(clips, trained):
    again = engine.train(clips, tiny())
    assert [r[3] for r in again.losses] == [r[3] for r in trained.losses]
    assert len(trained.losses) == 4  # 2 epochs x ceil(6 / 4)


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        engine.train([], tiny())


def test_nan_loss_reports_step(clips):
    run = tiny()
    data = engine.prepare_data(clips, run)
    model = engine.build_model(run)
    opt = engine.make_optimizer(model, run)
    bad = data.x0.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="alpha_bar"):
        engine.train_step(model, opt, data.clips, bad, build_cosine_schedule(1000), torch.Generator())


def test_checkpoint_roundtrip_bytes(trained, tmp_path):
    a = save_checkpoint(tmp_path / "a", trained.checkpoint)
    loaded = load_checkpoint(a)
    b = save_checkpoint(tmp_path / "b", loaded)
    for name in ("manifest.json", "tensors.f32"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for (k1, v1), (k2, v2) in zip(trained.checkpoint.model.state_dict().items(),
                                  loaded.model.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)


def test_checkpoint_resumes_optimizer(trained, tmp_path, clips):
    path = save_checkpoint(tmp_path / "c", trained.checkpoint)
    loaded = load_checkpoint(path)
    assert loaded.optimizer is not None
    assert len(loaded.optimizer.state) == len(trained.checkpoint.optimizer.state)
    assert loaded.epoch == trained.checkpoint.epoch


def test_identical_noise_groups_equal_single(trained, clips):
    ckpt = trained.checkpoint
    run = ckpt.config
    codec = engine.codec_for(run)
    sched = build_cosine_schedule(run.train.T)
    x = torch.from_numpy(np.stack([c.tensor(run.model.delta) for c in clips[:2]]))
    cond = ckpt.model.condition(x)
    one = engine.draw_noise(9, [0, 1], 1, (codec.num_joints, *codec.resolution))
    opts = InferenceOptions(steps=4, N=1)
    single = engine.sample_pose(ckpt.model, cond, sched, opts, codec, noise=one)
    many = engine.sample_pose(ckpt.model, cond, sched, replace(opts, N=7), codec, noise=one.repeat(7, 1, 1, 1, 1))
    assert torch.equal(single, many)


def test_group_order_does_not_matter(trained, clips):
    ckpt = trained.checkpoint
    run = ckpt.config
    codec = engine.codec_for(run)
    sched = build_cosine_schedule(run.train.T)
    x = torch.from_numpy(np.stack([c.tensor(run.model.delta) for c in clips[:3]]))
    cond = ckpt.model.condition(x)
    noise = engine.draw_noise(1, [0, 1, 2], 5, (codec.num_joints, *codec.resolution))
    opts = InferenceOptions(steps=2, N=5)
    a = engine.sample_pose(ckpt.model, cond, sched, opts, codec, noise=noise)
    b = engine.sample_pose(ckpt.model, cond, sched, opts, codec, noise=noise[[3, 0, 4, 2, 1]])
    assert torch.equal(a, b)


def test_noise_groups_are_prefix_stable():
    a = engine.draw_noise(3, [4, 8], 2, (2, 3, 3))
    b = engine.draw_noise(3, [8], 10, (2, 3, 3))
    assert torch.equal(a[:, 1], b[:2, 0])


def test_ensemble_mean_is_mean():
    x = torch.rand(6, 2, 3)
    assert torch.allclose(engine.ensemble_mean(x), x.mean(0), atol=1e-7)


def test_predict_keypoints_contract(trained, clips):
    ckpt = trained.checkpoint
    clip = torch.from_numpy(clips[0].tensor(ckpt.config.model.delta))
    opts = InferenceOptions(steps=2, N=2, seed=4)
    a = engine.predict_keypoints(clip, ckpt, opts)
    b = engine.predict_keypoints(clip, ckpt, opts)
    assert len(a) == 1 and a[0].num_joints == ckpt.config.model.num_joints
    assert np.array_equal(a[0].xy, b[0].xy)


def test_predict_rejects_mismatched_clip(trained, clips):
    wrong = torch.from_numpy(clips[0].tensor())[:1]  # one frame, model needs 3
    with pytest.raises(ConfigError):
        engine.predict_keypoints(wrong, trained.checkpoint, InferenceOptions(N=1, steps=1))


@pytest.mark.parametrize("steps", [1, 3, 17, 1000])
def test_any_step_count_without_retraining(trained, clips, steps):
    ckpt = trained.checkpoint
    clip = torch.from_numpy(clips[1].tensor(ckpt.config.model.delta))
    kps = engine.predict_keypoints(clip, ckpt, InferenceOptions(steps=steps, N=1))
    assert np.isfinite(kps[0].xy).all()


def test_sample_rejects_schedule_mismatch(trained):
    ckpt = trained.checkpoint
    codec = engine.codec_for(ckpt.config)
    with pytest.raises(ConfigError):
        engine.sample_pose(ckpt.model, torch.zeros(1, 16, 4, 2), build_cosine_schedule(50),
                           InferenceOptions(N=1, steps=1), codec)


def test_ablation_grid_rows(trained, clips):
    rows = engine.ablation_grid(trained.checkpoint, clips[:3])
    assert [(r["N"], r["steps"]) for r in rows] == [(n, s) for n in (1, 5, 10) for s in (1, 2, 4)]
    for r in rows:
        assert 0 <= r["all_pck@0.1"] <= 1
