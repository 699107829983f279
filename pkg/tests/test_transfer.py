import pytest
import torch

from vdit_lab.capture import CaptureFilter
from vdit_lab.errors import ConfigError, IncompatibilityError, ResourceError
from vdit_lab.model import DenoiseSchedule, ModelConfig, build_model, default_schedule, denoise, latent_mse, make_noise, prompt_embedding
from vdit_lab.transfer import layerwise_transfer_study, record_trace, replay_with_transfer

# default toy config in vision-only self-attention mode, source prompt 0,
# target prompt 1, noise seed 0
FROZEN_FULL_MSE_TO_SOURCE = 0.7592773328976287
FROZEN_BASELINE_MSE_TO_SOURCE = 1.502128693107671


@pytest.fixture(scope="module")
def self_model():
    return build_model(ModelConfig(attention_mode="self"))


def sched(m):
    return DenoiseSchedule.linear(m.config.steps, m.config.sigma_max)


def test_trace_cardinality(tiny_model):
    one = record_trace(tiny_model, 0, 0, sched(tiny_model), CaptureFilter(layers={0}, heads={0}, steps={0}))
    assert one.keys() == [(0, 0, 0)]
    again = record_trace(tiny_model, 0, 0, sched(tiny_model), CaptureFilter(layers={0}, heads={0}, steps={0}))
    assert again.equals(one)
    with pytest.raises(ResourceError):
        record_trace(tiny_model, 0, 0, sched(tiny_model), budget_bytes=1000)


def test_full_trace_default_size(default_model):
    tr = record_trace(default_model, 0, 0, default_schedule(default_model.config),
                      CaptureFilter(validate=False))
    assert len(tr.records) == 8 * 4 * 16


def test_self_transfer_and_empty_subset(tiny_model):
    s = sched(tiny_model)
    tr = record_trace(tiny_model, 0, 0, s)
    full = replay_with_transfer(tiny_model, 0, None, s, tr, range(2))
    assert torch.equal(full.latents, tr.source_latents) and full.mse_to_source == 0
    assert all(v == 0 for v in full.layer_divergence.values())
    empty = replay_with_transfer(tiny_model, 3, None, s, tr, [])
    cfg = tiny_model.config
    base, _ = denoise(tiny_model, make_noise(cfg, 0), prompt_embedding(cfg, 3), s)
    assert torch.equal(empty.latents, base) and empty.mse_to_baseline == 0


def test_override_precedence(tiny_model):
    s = sched(tiny_model)
    tr = record_trace(tiny_model, 0, 0, s)
    res = replay_with_transfer(tiny_model, 5, None, s, tr, [1])
    assert res.layer_divergence[1] == 0.0 and res.layer_divergence[0] > 0


def test_directional_pull_toward_source(self_model):
    s = sched(self_model)
    tr = record_trace(self_model, 0, 0, s)
    res = replay_with_transfer(self_model, 1, None, s, tr, range(8))
    assert res.mse_to_source == pytest.approx(FROZEN_FULL_MSE_TO_SOURCE, rel=1e-6)
    cfg = self_model.config
    base, _ = denoise(self_model, make_noise(cfg, 0), prompt_embedding(cfg, 1), s)
    assert latent_mse(base, tr.source_latents) == pytest.approx(FROZEN_BASELINE_MSE_TO_SOURCE, rel=1e-6)
    assert res.mse_to_source < latent_mse(base, tr.source_latents)


def test_incompatibility(tiny_model, tiny_config):
    s = sched(tiny_model)
    tr = record_trace(tiny_model, 0, 0, s)
    with pytest.raises(IncompatibilityError) as e:
        replay_with_transfer(tiny_model, 1, None, DenoiseSchedule.linear(5), tr, [0])
    assert e.value.field == "schedule.steps"
    with pytest.raises(IncompatibilityError) as e:
        replay_with_transfer(tiny_model, 1, None, DenoiseSchedule.linear(3, 1.0), tr, [0])
    assert e.value.field == "schedule.sigmas"
    other = build_model(ModelConfig(**{**tiny_config.to_dict(), "width": 5}))
    with pytest.raises(IncompatibilityError) as e:
        replay_with_transfer(other, 1, None, s, tr, [0])
    assert e.value.field == "layout.width"
    partial = record_trace(tiny_model, 0, 0, s, CaptureFilter(layers={0}))
    with pytest.raises(ConfigError):
        replay_with_transfer(tiny_model, 1, None, s, partial, [1])


def test_layerwise_study(tiny_model):
    s = sched(tiny_model)
    tr = record_trace(tiny_model, 0, 0, s)
    study = layerwise_transfer_study(tiny_model, tr, 1, s, jobs=2)
    assert [r.layers for r in study.per_layer] == [(0,), (1,)]
    for r in study.per_layer:
        solo = replay_with_transfer(tiny_model, 1, None, s, tr, r.layers)
        assert torch.equal(solo.latents, r.latents) and solo.mse_to_source == r.mse_to_source
    assert sorted(study.ranking()) == [0, 1]
    assert study.full.layers == (0, 1)
