"""Record self-attention traces and replay them into another run."""
from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import AttentionIntervention, AttentionRecord
from .capture import CaptureFilter, CaptureStore
from .errors import ConfigError, IncompatibilityError
from .jobs import run_jobs
from .layout import TokenLayout
from .model import DenoiseSchedule, ToyVDiT, denoise, latent_mse, make_noise, prompt_embedding
from .serialization import RunManifest, make_manifest


@dataclass
class AttentionTrace:
    manifest: RunManifest
    layout: TokenLayout
    num_layers: int
    num_heads: int
    steps: int
    records: dict[tuple[int, int, int], AttentionRecord]
    source_latents: torch.Tensor | None = None

    def keys(self) -> list[tuple[int, int, int]]:
        """Record keys (layer, head, step) in (step, layer, head) order."""
        return sorted(self.records, key=lambda k: (k[2], k[0], k[1]))

    def layers(self) -> set[int]:
        return {k[0] for k in self.records}

    def map(self, layer: int, head: int, step: int) -> np.ndarray:
        return self.records[(layer, head, step)].matrix

    def check_complete(self, capture: CaptureFilter) -> None:
        want = set(capture.keys(self.num_layers, self.num_heads, self.steps))
        missing = want - set(self.records)
        if missing:
            raise ConfigError(f"trace is missing {len(missing)} records, e.g. {sorted(missing)[0]}")
        for r in self.records.values():
            if r.n != self.layout.n:
                raise IncompatibilityError("n", self.layout.n, r.n)

    def equals(self, other: "AttentionTrace") -> bool:
        if (self.layout, self.num_layers, self.num_heads, self.steps) != (other.layout, other.num_layers, other.num_heads, other.steps):
            return False
        if self.manifest.to_json() != other.manifest.to_json() or self.keys() != other.keys():
            return False
        if not all(np.array_equal(self.records[k].matrix, other.records[k].matrix) for k in self.records):
            return False
        a, b = self.source_latents, other.source_latents
        return (a is None and b is None) or (a is not None and b is not None and torch.equal(a, b))


def record_trace(
    model: ToyVDiT,
    prompt_seed: int,
    noise_seed: int,
    schedule: DenoiseSchedule,
    capture: CaptureFilter | None = None,
    budget_bytes: int | None = None,
    text: torch.Tensor | None = None,
) -> AttentionTrace:
    capture = capture or CaptureFilter()
    cfg = model.config
    if text is None:
        text = prompt_embedding(cfg, prompt_seed)
    store = CaptureStore(budget_bytes=budget_bytes)
    latents, records = denoise(model, make_noise(cfg, noise_seed), text, schedule, capture=capture, collector=store)
    trace = AttentionTrace(
        manifest=make_manifest(model, prompt_seed, noise_seed, schedule, capture=capture.describe()),
        layout=model.attention_layout,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        steps=schedule.steps,
        records={r.key: r for r in records},
        source_latents=latents,
    )
    trace.check_complete(capture)
    return trace


@dataclass
class TransferResult:
    layers: tuple[int, ...]
    latents: torch.Tensor
    mse_to_source: float
    mse_to_baseline: float
    layer_divergence: dict[int, float] = field(default_factory=dict)


def _check_compatible(model: ToyVDiT, schedule: DenoiseSchedule, trace: AttentionTrace) -> None:
    if model.attention_layout != trace.layout:
        for f in ("num_frames", "height", "width", "num_text", "text_position"):
            a, b = getattr(trace.layout, f), getattr(model.attention_layout, f)
            if a != b:
                raise IncompatibilityError(f"layout.{f}", a, b)
    if schedule.steps != trace.steps:
        raise IncompatibilityError("schedule.steps", trace.steps, schedule.steps)
    if list(schedule.sigmas) != list(trace.manifest.schedule.get("sigmas", [])):
        raise IncompatibilityError("schedule.sigmas", trace.manifest.schedule.get("sigmas"), list(schedule.sigmas))
    if (model.config.num_layers, model.config.num_heads) != (trace.num_layers, trace.num_heads):
        raise IncompatibilityError("heads/layers", (trace.num_layers, trace.num_heads),
                                   (model.config.num_layers, model.config.num_heads))


def transfer_interventions(trace: AttentionTrace, layers: Iterable[int], heads: Iterable[int] | None = None):
    heads = range(trace.num_heads) if heads is None else list(heads)
    out = {}
    for l in layers:
        for s in range(trace.steps):
            out[(l, s)] = AttentionIntervention(map_override={h: trace.map(l, h, s) for h in heads})
    return out


def replay_with_transfer(
    model: ToyVDiT,
    target_prompt_seed: int,
    noise_seed: int | None,
    schedule: DenoiseSchedule,
    trace: AttentionTrace,
    layers: Iterable[int],
    baseline: torch.Tensor | None = None,
    heads: Iterable[int] | None = None,
    text: torch.Tensor | None = None,
) -> TransferResult:
    """Run the target with the trace's maps injected on ``layers``.

    ``noise_seed=None`` reuses the source run's noise seed.  ``baseline`` (the
    un-transferred target latents) is recomputed when not supplied.
    """
    _check_compatible(model, schedule, trace)
    layers = tuple(sorted(set(int(l) for l in layers)))
    missing = [l for l in layers if l not in trace.layers()]
    if missing:
        raise ConfigError(f"layers {missing} are not in the trace")
    if noise_seed is None:
        noise_seed = trace.manifest.noise_seed
    cfg = model.config
    if text is None:
        text = prompt_embedding(cfg, target_prompt_seed)
    noise = make_noise(cfg, noise_seed)
    ivs = transfer_interventions(trace, layers, heads)
    latents, records = denoise(model, noise, text, schedule, interventions=ivs,
                               capture=CaptureFilter(layers=trace.layers(), validate=False))
    if baseline is None:
        baseline, _ = denoise(model, noise, text, schedule)
    div: dict[int, list[float]] = {}
    for r in records:
        if r.key in trace.records:
            d = float(np.abs(r.matrix.astype(np.float64) - trace.records[r.key].matrix).mean())
            div.setdefault(r.layer, []).append(d)
    src = trace.source_latents
    return TransferResult(
        layers=layers,
        latents=latents,
        mse_to_source=latent_mse(latents, src) if src is not None else float("nan"),
        mse_to_baseline=latent_mse(latents, baseline),
        layer_divergence={l: float(np.mean(v)) for l, v in sorted(div.items())},
    )


@dataclass
class LayerwiseStudy:
    per_layer: list[TransferResult]
    full: TransferResult
    baseline_mse_to_source: float

    def ranking(self) -> list[int]:
        """Layers by MSE-to-source, ascending (strongest pull toward the source first)."""
        return [r.layers[0] for r in sorted(self.per_layer, key=lambda r: (r.mse_to_source, r.layers[0]))]


def layerwise_transfer_study(
    model: ToyVDiT,
    trace: AttentionTrace,
    target_prompt_seed: int,
    schedule: DenoiseSchedule,
    noise_seed: int | None = None,
    jobs: int = 1,
) -> LayerwiseStudy:
    if noise_seed is None:
        noise_seed = trace.manifest.noise_seed
    cfg = model.config
    baseline, _ = denoise(model, make_noise(cfg, noise_seed), prompt_embedding(cfg, target_prompt_seed), schedule)
    layers = sorted(trace.layers())
    per_layer = run_jobs(
        lambda l: replay_with_transfer(model, target_prompt_seed, noise_seed, schedule, trace, [l], baseline=baseline),
        layers, jobs,
    )
    full = replay_with_transfer(model, target_prompt_seed, noise_seed, schedule, trace, layers, baseline=baseline)
    src = trace.source_latents
    return LayerwiseStudy(per_layer, full, latent_mse(baseline, src) if src is not None else float("nan"))
