import numpy as np
import pytest
import torch

from vdit_lab.errors import ConfigError, TrainingDivergedError
from vdit_lab.model import ModelConfig, build_model, clone_model
from vdit_lab.training import (
    EMA, TrainingConfig, diffusion_loss, render_square_video, retrain, square_position, synth_dataset,
)

from tests.oracle import central_difference, ema_closed_form

MINI = ModelConfig(num_layers=2, num_heads=2, head_dim=4, num_frames=1, height=2, width=2, num_text=2,
                   latent_channels=2, text_dim=4, mlp_ratio=2)


def gradient_check(cfg: ModelConfig = MINI, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences (h=1e-4)
    over every parameter, in float64."""
    m = build_model(cfg).double()
    m.map_dtype = torch.float64
    rng = np.random.default_rng(seed)
    x0 = torch.from_numpy(rng.standard_normal((2, *cfg.latent_shape)))
    text = torch.from_numpy(rng.standard_normal((2, cfg.num_text, cfg.text_dim)))
    sigma = torch.tensor([0.5, 1.25], dtype=torch.float64)
    eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)))
    diffusion_loss(m, x0, text, sigma, eps).backward()
    worst = 0.0
    for _, p in m.named_parameters():
        a = p.grad.numpy()
        with torch.no_grad():
            f = central_difference(lambda: float(diffusion_loss(m, x0, text, sigma, eps)), p.data.numpy(), 1e-4)
        rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
        worst = max(worst, float(rel.max()))
    return worst


def test_gradient_check():
    assert MINI.attention_layout.n <= 6 and MINI.width_hidden <= 8
    assert gradient_check() < 1e-3


def test_lr_schedule():
    cfg = TrainingConfig(frozenset({0}), lr=2e-3, warmup_steps=4)
    assert [cfg.lr_at(s) for s in range(6)] == [5e-4, 1e-3, 1.5e-3, 2e-3, 2e-3, 2e-3]
    assert TrainingConfig(frozenset({0}), warmup_steps=0).lr_at(0) == 1e-3
    with pytest.raises(ConfigError):
        TrainingConfig(frozenset({0}), ema_beta=1.0)


def test_ema_scalar_closed_form():
    theta = torch.tensor([1.0], dtype=torch.float64)
    ema = EMA({"w": theta}, beta=0.9)
    seq = [2.0, 0.5, -1.0]
    for v in seq:
        ema.update({"w": torch.tensor([v], dtype=torch.float64)})
    assert ema.shadow["w"].item() == pytest.approx(0.836, abs=1e-15)
    assert ema.shadow["w"].item() == pytest.approx(ema_closed_form(1.0, seq, 0.9), abs=1e-15)


def test_zero_steps_identity(tiny_model):
    before = clone_model(tiny_model)
    cfg = TrainingConfig(frozenset({1}), total_steps=0)
    m, ema, trace = retrain(tiny_model, cfg, synth_dataset(tiny_model.config, 0, 1))
    assert trace.losses == []
    for a, b, c in zip(before.parameters(), m.parameters(), ema.parameters()):
        assert torch.equal(a, b) and torch.equal(a, c)


def test_frozen_unchanged_and_ema_recursion(tiny_model):
    before = {n: p.detach().clone() for n, p in tiny_model.named_parameters()}
    cfg = TrainingConfig(frozenset({1}), total_steps=12, batch_size=2, warmup_steps=5, ema_beta=0.8)
    history = []
    model, ema_model, trace = retrain(
        tiny_model, cfg, synth_dataset(tiny_model.config, 0, 24),
        on_step=lambda s, m, e: history.append({n: p.detach().clone() for n, p in m.named_parameters()
                                                if n.startswith("blocks.1.")}))
    after = dict(model.named_parameters())
    for n, p in before.items():
        if n.startswith("blocks.1."):
            assert not torch.equal(p, after[n])
        else:
            assert torch.equal(p, after[n])
    ema_params = dict(ema_model.named_parameters())
    for n in history[0]:
        avg = before[n].clone()
        for snap in history:
            avg = avg * cfg.ema_beta + snap[n] * (1 - cfg.ema_beta)
        np.testing.assert_allclose(ema_params[n].detach().numpy(), avg.numpy(), rtol=0, atol=1e-6)
        manual = before[n].clone()
        for snap in history:
            manual.mul_(cfg.ema_beta).add_(snap[n], alpha=1 - cfg.ema_beta)
        assert torch.equal(ema_params[n], manual)
    assert trace.lrs == [cfg.lr_at(s) for s in range(12)]
    assert not any(p.requires_grad is False for p in model.parameters())


def test_training_reduces_loss():
    cfg = ModelConfig(num_layers=2, num_heads=2, head_dim=8, num_frames=2, height=4, width=4, num_text=2, text_dim=8)
    model = build_model(cfg)
    tc = TrainingConfig(frozenset({0, 1}), train_io=True, total_steps=500, batch_size=4)
    _, _, trace = retrain(model, tc, synth_dataset(cfg, 0, 2000))
    assert np.mean(trace.losses[-50:]) < np.mean(trace.losses[:50])


def test_retrain_errors(tiny_model):
    with pytest.raises(ConfigError):
        retrain(tiny_model, TrainingConfig(frozenset()), synth_dataset(tiny_model.config, 0, 4))
    with pytest.raises(ConfigError):
        retrain(tiny_model, TrainingConfig(frozenset({7})), synth_dataset(tiny_model.config, 0, 4))
    with pytest.raises(ConfigError):
        retrain(tiny_model, TrainingConfig(frozenset({0}), total_steps=3, batch_size=2),
                synth_dataset(tiny_model.config, 0, 3))
    with torch.no_grad():
        tiny_model.out_proj.bias.fill_(float("inf"))
    with pytest.raises(TrainingDivergedError) as e:
        retrain(tiny_model, TrainingConfig(frozenset({0}), total_steps=3, batch_size=1),
                synth_dataset(tiny_model.config, 0, 3))
    assert e.value.step == 0


def test_synth_dataset(tiny_config):
    a = list(synth_dataset(tiny_config, 4, 5))
    b = list(synth_dataset(tiny_config, 4, 5))
    assert len(a) == 5 and all(torch.equal(x[0], y[0]) and torch.equal(x[1], y[1]) for x, y in zip(a, b))
    with pytest.raises(ConfigError):
        synth_dataset(tiny_config, 0, 0)


def test_square_translation():
    cfg = ModelConfig(num_frames=4, height=8, width=8)
    start, vel = (6, 1), (1, -1)
    video = render_square_video(cfg, start, vel).numpy()
    for f in range(3):
        r, c = square_position(start, vel, f, 8, 8)
        r2, c2 = square_position(start, vel, f + 1, 8, 8)
        assert (r2, c2) == ((r + 1) % 8, (c - 1) % 8)
        # frame f+1 is frame f rolled by the velocity, pixel for pixel
        np.testing.assert_array_equal(np.roll(video[f], shift=vel, axis=(0, 1)), video[f + 1])
        assert video[f, r, c, 0] == 1.0 and video[f].min() == -0.5
