import math
import tempfile
from pathlib import Path

import pytest
import torch

from dataset_service import generate_shape_motion
from errors import ConfigurationError, DatasetError
from latent_service import SeededRng
from models_data import ShapeMotionSpec
from models_latent import LatentConfig
from models_networks import ArchConfig
from models_training import LossReport, TrainConfig
from networks import NetworkBundle, build_bundle, image_disc_forward, sample_fake_videos, video_disc_forward
from training_service import (
    LOSS_CSV_HEADER,
    discriminator_losses,
    discriminator_update,
    generator_loss,
    generator_update,
    info_lower_bound,
    sample_S1,
    sample_ST,
    train_loop,
    train_step,
    write_loss_csv,
)


def _bundle(d_a: int = 0, seed: int = 0) -> NetworkBundle:
    latent = LatentConfig(d_c=8, d_m=4, d_e=4, d_a=d_a)
    arch = ArchConfig(image_size=32, base_channels=4, latent_dim=12, T=8, d_a=d_a)
    return build_bundle(arch, latent, seed)


def _cfg(**overrides) -> TrainConfig:
    values = dict(batch_size=2, iterations=2, T=8, log_every=1, checkpoint_every=0)
    values.update(overrides)
    return TrainConfig(**values)


def _indexed_clip(K: int) -> torch.Tensor:
    """Frame k is filled with the value k"""
    return torch.arange(K, dtype=torch.float32).view(K, 1, 1, 1).expand(K, 3, 4, 4).clone()


def _clips(count: int = 2, K: int = 10, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(K, 3, 32, 32, generator=g) * 2 - 1 for _ in range(count)]


def _snapshot(named_params):
    return {name: p.detach().clone() for name, p in named_params}


def _changed(before, named_params):
    return {name for name, p in named_params if not torch.equal(before[name], p.detach())}


def test_s1_on_single_frame_clip():
    clip = _indexed_clip(1)
    assert torch.equal(sample_S1(clip, SeededRng(0)), clip[0])


def test_s1_is_uniform_over_frames():
    clip = _indexed_clip(4)
    g = SeededRng(0, 3).torch()
    counts = torch.zeros(4)
    draws = 40_000
    for _ in range(draws):
        counts[int(sample_S1(clip, g)[0, 0, 0])] += 1
    assert torch.all((counts / draws - 0.25).abs() < 0.01)


def test_st_returns_consecutive_frames():
    clip = _indexed_clip(16)
    assert torch.equal(sample_ST(clip, 16, SeededRng(0)), clip)

    clip = _indexed_clip(20)
    g = SeededRng(1).torch()
    starts = set()
    for _ in range(500):
        window = sample_ST(clip, 16, g)
        values = window[:, 0, 0, 0].long().tolist()
        assert values == list(range(values[0], values[0] + 16))
        starts.add(values[0])
    assert starts == {0, 1, 2, 3, 4}


def test_st_rejects_short_clip():
    with pytest.raises(DatasetError):
        sample_ST(_indexed_clip(8), 16, SeededRng(0))


def test_discriminator_loss_closed_forms():
    image_loss, video_loss = discriminator_losses(
        torch.tensor([0.8]), torch.tensor([0.3]), torch.tensor([0.8]), torch.tensor([0.3])
    )
    assert abs(image_loss.item() - 0.57982) < 1e-5
    assert abs(video_loss.item() - 0.57982) < 1e-5

    half = torch.full((4, 1), 0.5)
    image_loss, video_loss = discriminator_losses(half, half, half, half)
    assert abs((image_loss + video_loss).item() - 4 * math.log(2)) < 1e-6

    ones, zeros = torch.ones(3), torch.zeros(3)
    image_loss, video_loss = discriminator_losses(ones, zeros, ones, zeros)
    assert (image_loss + video_loss).item() < 1e-5


def test_discriminator_loss_without_image_term():
    image_loss, video_loss = discriminator_losses(None, None, torch.tensor([0.8]), torch.tensor([0.3]))
    assert image_loss.item() == 0.0
    assert abs(video_loss.item() - 0.57982) < 1e-5


def test_generator_loss_values():
    p = torch.tensor([0.3])
    assert abs(generator_loss(p, p).item() - 2.40795) < 1e-4
    half = torch.tensor([0.5])
    assert abs(generator_loss(half, half).item() - 2 * math.log(2)) < 1e-6
    assert abs(generator_loss(None, half).item() - math.log(2)) < 1e-6


def test_generator_loss_pushes_scores_up():
    for mode in ("non_saturating", "saturating"):
        p = torch.tensor([0.3], requires_grad=True)
        generator_loss(p, p.detach().clone(), mode).backward()
        assert p.grad.item() < 0, mode
    with pytest.raises(ConfigurationError):
        generator_loss(None, torch.tensor([0.5]), "hinge")


def test_info_bound():
    q = torch.eye(3)
    ce, bound = info_lower_bound(q, torch.eye(3), 3)
    assert ce.item() < 1e-5

    q = torch.full((5, 6), 1 / 6)
    ce, bound = info_lower_bound(q, torch.tensor([0, 1, 2, 3, 5]), 6)
    assert abs(ce.item() - math.log(6)) < 1e-6
    assert abs(float(bound)) < 1e-5

    q = torch.tensor([[0.75, 0.25]])
    ce, _ = info_lower_bound(q, torch.tensor([0]), 2)
    assert abs(ce.item() - 0.28768) < 1e-5


def test_discriminator_phase_leaves_generator_alone():
    bundle = _bundle(d_a=2)
    cfg = _cfg()
    bundle.ensure_adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    clips = torch.stack(_clips(2, K=8))
    g_before = _snapshot(bundle.generator_parameters())
    d_before = _snapshot(bundle.discriminator_parameters())

    discriminator_update(bundle, clips[:, 0], clips, cfg, SeededRng(0).torch())

    assert not _changed(g_before, bundle.generator_parameters())
    assert _changed(d_before, bundle.discriminator_parameters())
    assert all(p.grad is None for p in bundle.parameters())


def test_generator_phase_leaves_discriminators_alone():
    bundle = _bundle(d_a=2)
    cfg = _cfg()
    bundle.ensure_adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    g_before = _snapshot(bundle.generator_parameters())
    d_before = _snapshot(bundle.discriminator_parameters())

    g_loss, info_loss = generator_update(bundle, 2, cfg, SeededRng(0).torch())

    assert not _changed(d_before, bundle.discriminator_parameters())
    changed = _changed(g_before, bundle.generator_parameters())
    assert any(name.startswith("g_image.") for name in changed)
    assert any(name.startswith("motion_rnn.") for name in changed)
    assert g_loss.item() > 0 and info_loss.item() > 0
    assert all(p.requires_grad for p in bundle.parameters())


def test_generator_loss_gradient_reaches_motion_rnn():
    for mode in ("non_saturating", "saturating"):
        bundle = _bundle(seed=5)
        bundle.train()
        fake, _ = sample_fake_videos(bundle, 2, 8, SeededRng(3))
        d_video_fake, _ = video_disc_forward(bundle.d_video, fake)
        loss = generator_loss(image_disc_forward(bundle.d_image, fake[:, 0]), d_video_fake, mode)
        loss.backward()
        for name, param in bundle.motion_rnn.named_parameters():
            assert param.grad is not None, (mode, name)
            assert bool(torch.isfinite(param.grad).all()), (mode, name)
            assert float(param.grad.abs().sum()) > 0, (mode, name)


def test_train_step_is_deterministic():
    reports = []
    states = []
    for _ in range(2):
        bundle = _bundle(seed=4)
        reports.append(train_step(bundle, _clips(), _cfg(), SeededRng(9, 1)))
        states.append(bundle.state_dict())
    assert reports[0] == reports[1]
    assert reports[0].iteration == 1
    for key, value in states[0].items():
        assert torch.equal(value, states[1][key]), key


def test_train_step_without_image_discriminator():
    bundle = _bundle()
    before = _snapshot(bundle.d_image.named_parameters())
    report = train_step(bundle, _clips(), _cfg(use_image_discriminator=False), SeededRng(0))
    assert report.d_image_loss == 0.0
    assert not _changed(before, bundle.d_image.named_parameters())


def test_supervised_q_uses_real_labels():
    heads = []
    for labels in (None, torch.tensor([0, 1])):
        bundle = _bundle(d_a=2, seed=1)
        cfg = _cfg(supervised_q=labels is not None)
        bundle.ensure_adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        clips = torch.stack(_clips(2, K=8))
        discriminator_update(bundle, clips[:, 0], clips, cfg, SeededRng(2).torch(), labels)
        heads.append(bundle.q_head.weight.detach().clone())
    assert not torch.equal(heads[0], heads[1])


def test_train_step_rejects_mismatched_length():
    with pytest.raises(ConfigurationError):
        train_step(_bundle(), _clips(), _cfg(T=9), SeededRng(0))
    with pytest.raises(DatasetError):
        train_step(_bundle(), _clips(K=6), _cfg(), SeededRng(0))


def test_frozen_generator_image_discriminator_learns():
    bundle = _bundle(seed=2)
    cfg = _cfg(lr=0.001)
    bundle.ensure_adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    real = torch.ones(4, 8, 3, 32, 32)
    g = SeededRng(0, 5).torch()
    losses = []
    for _ in range(200):
        image_loss, _ = discriminator_update(bundle, real[:, 0], real, cfg, g)
        losses.append(image_loss.item())
    first, last = sum(losses[:10]) / 10, sum(losses[-10:]) / 10
    assert last < 0.9 * first


def _dataset(count: int = 4, length: int = 8):
    return generate_shape_motion(ShapeMotionSpec(count=count, size=32, length=length, seed=3))


def test_zero_iterations_keeps_bundle():
    bundle = _bundle(seed=6)
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    with tempfile.TemporaryDirectory() as tmp:
        bundle, history = train_loop(bundle, _dataset(), _cfg(iterations=0), tmp)
        assert (Path(tmp) / "ckpt_0.mcgn").exists()
    assert history == []
    assert bundle.iteration == 0
    for key, value in bundle.state_dict().items():
        assert torch.equal(value, before[key]), key


def test_train_loop_history_and_checkpoints():
    with tempfile.TemporaryDirectory() as tmp:
        bundle, history = train_loop(_bundle(), _dataset(), _cfg(iterations=3, checkpoint_every=2), tmp)
        names = sorted(p.name for p in Path(tmp).glob("*.mcgn"))
    assert [r.iteration for r in history] == [1, 2, 3]
    assert bundle.iteration == 3
    assert names == ["ckpt_2.mcgn", "ckpt_3.mcgn"]
    assert all(math.isfinite(r.g_loss) for r in history)


def test_train_loop_rejects_short_clips():
    with pytest.raises(DatasetError):
        train_loop(_bundle(), _dataset(length=6), _cfg())


def test_supervised_q_needs_labels_and_actions():
    with pytest.raises(ConfigurationError):
        train_loop(_bundle(), _dataset(), _cfg(supervised_q=True))


def test_loss_csv_layout():
    history = [LossReport(iteration=1, d_image_loss=1.25, d_video_loss=1.5, g_loss=0.5, info_loss=0.0)]
    with tempfile.TemporaryDirectory() as tmp:
        path = write_loss_csv(history, Path(tmp) / "loss.csv")
        write_loss_csv([history[0].model_copy(update={"iteration": 2})], path, append=True)
        lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LOSS_CSV_HEADER)
    assert lines[1] == "1,1.25,1.5,0.5,0.0"
    assert lines[2].startswith("2,")
    assert len(lines) == 3


def run_all_tests():
    """Run the training tests without pytest"""
    tests = [value for name, value in globals().items() if name.startswith("test_") and callable(value)]
    for test in tests:
        test()
        print(f"ok  {test.__name__}")
    print(f"\nAll {len(tests)} training tests passed!")


if __name__ == "__main__":
    run_all_tests()
