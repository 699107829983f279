"""Two-pass oracle bottom-k masking, layer sweeps and temperature sweeps.

Pass 1 is an unmasked run that serves as the baseline and records each
matrix's k-quantile.  Pass 2 reruns the same seed and schedule with masks.
By default (``threshold_source="live"``) pass 2 thresholds every matrix at
the k-quantile of the map it is about to mask, so the realized fraction is
exact even after earlier layers or steps have drifted from pass 1;
``"pass1"`` applies the pass-1 thresholds verbatim instead.
"""
from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionIntervention, AttentionRecord, lower_quantile, row_entropy
from .capture import CaptureFilter
from .errors import ConfigError, ContractError
from .jobs import run_jobs
from .model import (
    DenoiseSchedule, ToyVDiT, default_schedule, denoise, latent_mse, latent_psnr, make_noise, prompt_embedding,
)


def quantile_threshold(weights, k: float) -> float:
    """Lower empirical k-quantile with ties kept (entries ``< q`` get masked)."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ContractError("quantile of an empty weight set")
    if not 0.0 <= k < 1.0:
        raise ContractError(f"k must lie in [0, 1), got {k}")
    return float(lower_quantile(torch.from_numpy(w), torch.tensor(k, dtype=torch.float64)))


@dataclass(frozen=True)
class MaskPlan:
    k: float
    included: frozenset[int] | None = None  # None: every layer
    excluded: frozenset[int] = frozenset()
    threshold_source: str = "live"
    renormalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.k < 1.0:
            raise ConfigError(f"k must lie in [0, 1), got {self.k}")
        if self.included is not None:
            object.__setattr__(self, "included", frozenset(int(l) for l in self.included))
        object.__setattr__(self, "excluded", frozenset(int(l) for l in self.excluded))
        if self.included is not None and self.included & self.excluded:
            raise ConfigError(f"layers {sorted(self.included & self.excluded)} are both included and excluded")
        if self.threshold_source not in ("live", "pass1"):
            raise ConfigError(f"threshold_source must be 'live' or 'pass1', got {self.threshold_source!r}")

    def layers(self, num_layers: int) -> list[int]:
        base = range(num_layers) if self.included is None else sorted(self.included)
        out = [l for l in base if l not in self.excluded]
        bad = [l for l in out if not 0 <= l < num_layers]
        if bad:
            raise ConfigError(f"plan references layers {bad}; model has {num_layers}")
        return out


@dataclass
class DegradationReport:
    plan: MaskPlan
    mse: float
    psnr: float
    realized: dict[tuple[int, int, int], float] = field(default_factory=dict)
    thresholds: dict[tuple[int, int, int], float] = field(default_factory=dict)
    renorm_drift: float = 0.0
    layer: int | None = None

    @property
    def mean_realized(self) -> float:
        return float(np.mean(list(self.realized.values()))) if self.realized else 0.0

    def max_fraction_error(self) -> float:
        if not self.realized:
            return 0.0
        return max(abs(f - self.plan.k) for f in self.realized.values())

    def row(self) -> dict:
        p = self.plan
        return {
            "k": p.k,
            "included_layers": "all" if p.included is None else ";".join(map(str, sorted(p.included))),
            "excluded_layers": ";".join(map(str, sorted(p.excluded))),
            "layer": "" if self.layer is None else self.layer,
            "mse": repr(self.mse),
            "psnr": "inf" if math.isinf(self.psnr) else repr(self.psnr),
            "realized_fraction": repr(self.mean_realized),
        }


CSV_COLUMNS = ("k", "included_layers", "excluded_layers", "layer", "mse", "psnr", "realized_fraction")


class Pass1Stats:
    """Collector: per-matrix k-quantiles and removed mass for several ``k`` at once."""

    def __init__(self, ks: Iterable[float], layers: Iterable[int]):
        self.ks = sorted(set(float(k) for k in ks))
        self.layers = set(layers)
        self.thresholds: dict[float, dict] = {k: {} for k in self.ks}
        self.removed: dict[float, dict] = {k: {} for k in self.ks}

    def add(self, rec: AttentionRecord) -> None:
        if rec.layer not in self.layers:
            return
        m = torch.from_numpy(rec.matrix.astype(np.float64))
        flat = m.reshape(-1)
        for k in self.ks:
            q = float(lower_quantile(flat, torch.tensor(k, dtype=torch.float64)))
            self.thresholds[k][rec.key] = q
            self.removed[k][rec.key] = float(torch.where(m < q, m, 0.0).sum(dim=-1).mean())


class _Realized:
    def __init__(self):
        self.fractions: dict[tuple[int, int, int], float] = {}

    def add(self, rec: AttentionRecord) -> None:
        self.fractions[rec.key] = float(np.count_nonzero(rec.matrix == 0)) / rec.matrix.size


@dataclass
class Baseline:
    latents: torch.Tensor
    stats: Pass1Stats
    noise: torch.Tensor
    text: torch.Tensor
    schedule: DenoiseSchedule


def run_pass1(model: ToyVDiT, prompt_seed: int, schedule: DenoiseSchedule | None = None, noise_seed: int = 0,
              ks: Iterable[float] = (), layers: Iterable[int] | None = None, text: torch.Tensor | None = None) -> Baseline:
    cfg = model.config
    schedule = schedule or default_schedule(cfg)
    layers = range(cfg.num_layers) if layers is None else layers
    stats = Pass1Stats(ks, layers)
    noise = make_noise(cfg, noise_seed)
    text = prompt_embedding(cfg, prompt_seed) if text is None else text
    capture = CaptureFilter(layers=stats.layers, validate=False) if stats.layers and stats.ks else None
    latents, _ = denoise(model, noise, text, schedule, capture=capture, collector=stats)
    return Baseline(latents, stats, noise, text, schedule)


def mask_interventions(plan: MaskPlan, layers: Sequence[int], steps: int, num_heads: int,
                       thresholds: dict | None = None) -> dict:
    if plan.threshold_source == "live":
        iv = AttentionIntervention(mask_fraction=plan.k, renormalize=plan.renormalize)
        return {(l, None): iv for l in layers}
    if thresholds is None:
        raise ConfigError("pass1 thresholds required")
    return {
        (l, s): AttentionIntervention(mask_threshold={h: min(thresholds[(l, h, s)], 1.0) for h in range(num_heads)},
                                      renormalize=plan.renormalize)
        for l in layers for s in range(steps)
    }


def oracle_masked_run(
    model: ToyVDiT,
    prompt_seed: int,
    schedule: DenoiseSchedule | None,
    plan: MaskPlan,
    noise_seed: int = 0,
    baseline: Baseline | None = None,
) -> tuple[torch.Tensor, DegradationReport]:
    cfg = model.config
    schedule = schedule or default_schedule(cfg)
    layers = plan.layers(cfg.num_layers)
    if baseline is None or plan.k not in baseline.stats.ks or not set(layers) <= baseline.stats.layers:
        baseline = run_pass1(model, prompt_seed, schedule, noise_seed, ks=[plan.k], layers=layers)
    thresholds = {key: q for key, q in baseline.stats.thresholds[plan.k].items() if key[0] in layers}
    ivs = mask_interventions(plan, layers, schedule.steps, cfg.num_heads, thresholds)
    realized = _Realized()
    capture = CaptureFilter(layers=layers, validate=False) if layers else None
    latents, _ = denoise(model, baseline.noise, baseline.text, schedule, interventions=ivs, capture=capture,
                         collector=realized)
    mse = latent_mse(latents, baseline.latents)
    drift = [v for key, v in baseline.stats.removed[plan.k].items() if key[0] in layers]
    report = DegradationReport(
        plan=plan,
        mse=mse,
        psnr=latent_psnr(mse, baseline.latents),
        realized=realized.fractions,
        thresholds=thresholds,
        renorm_drift=float(np.mean(drift)) if drift else 0.0,
        layer=layers[0] if plan.included is not None and len(layers) == 1 else None,
    )
    return latents, report


def layer_sensitivity_sweep(model: ToyVDiT, prompt_seed: int, k: float, schedule: DenoiseSchedule | None = None,
                            noise_seed: int = 0, jobs: int = 1) -> list[DegradationReport]:
    """One single-layer masked run per layer, most damaging layer first."""
    schedule = schedule or default_schedule(model.config)
    base = run_pass1(model, prompt_seed, schedule, noise_seed, ks=[k])
    reports = run_jobs(
        lambda l: oracle_masked_run(model, prompt_seed, schedule, MaskPlan(k, included={l}), noise_seed, base)[1],
        range(model.config.num_layers), jobs,
    )
    return sorted(reports, key=lambda r: (-r.mse, r.layer))


def exclusion_sweep(model: ToyVDiT, prompt_seed: int, ks: Sequence[float], excluded: Iterable[int] = (),
                    schedule: DenoiseSchedule | None = None, noise_seed: int = 0, jobs: int = 1) -> list[DegradationReport]:
    """Mask every layer except ``excluded`` at each ``k``; reports in ascending ``k``."""
    ks = list(ks)
    if ks != sorted(ks):
        raise ConfigError("k values must be sorted ascending")
    excluded = frozenset(excluded)
    schedule = schedule or default_schedule(model.config)
    base = run_pass1(model, prompt_seed, schedule, noise_seed, ks=ks,
                     layers=[l for l in range(model.config.num_layers) if l not in excluded])
    return run_jobs(
        lambda k: oracle_masked_run(model, prompt_seed, schedule, MaskPlan(k, excluded=excluded), noise_seed, base)[1],
        ks, jobs,
    )


@dataclass
class TemperaturePoint:
    temperature: float
    latents: torch.Tensor
    mean_entropy: float
    mse: float


class _Entropy:
    def __init__(self, layer: int):
        self.layer = layer
        self.values: list[float] = []

    def add(self, rec: AttentionRecord) -> None:
        if rec.layer == self.layer:
            self.values.append(float(row_entropy(rec).mean()))


def temperature_sweep(model: ToyVDiT, prompt_seed: int, layer: int, temperatures: Sequence[float],
                      schedule: DenoiseSchedule | None = None, noise_seed: int = 0,
                      jobs: int = 1) -> list[TemperaturePoint]:
    """One run per temperature on ``layer`` (all heads, all steps), compared to T=1."""
    cfg = model.config
    if not 0 <= layer < cfg.num_layers:
        raise ConfigError(f"layer {layer} out of range")
    bad = [t for t in temperatures if not t > 0]
    if bad:
        raise ConfigError(f"temperatures must be positive, got {bad}")
    schedule = schedule or default_schedule(cfg)
    noise, text = make_noise(cfg, noise_seed), prompt_embedding(cfg, prompt_seed)
    baseline, _ = denoise(model, noise, text, schedule)

    def one(t: float) -> TemperaturePoint:
        ent = _Entropy(layer)
        ivs = {(layer, None): AttentionIntervention(temperature=float(t))}
        lat, _ = denoise(model, noise, text, schedule, interventions=ivs,
                         capture=CaptureFilter(layers={layer}, validate=False), collector=ent)
        return TemperaturePoint(float(t), lat, float(np.mean(ent.values)) if ent.values else float("nan"),
                                latent_mse(lat, baseline))

    return run_jobs(one, temperatures, jobs)


def write_reports_csv(path: str | Path, reports: Sequence[DegradationReport]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


def reports_summary(reports: Sequence[DegradationReport]) -> dict:
    return {
        "reports": [
            {**r.row(), "mse": r.mse, "psnr": "inf" if math.isinf(r.psnr) else r.psnr,
             "max_fraction_error": r.max_fraction_error(), "renorm_drift": r.renorm_drift,
             "matrices": len(r.realized)}
            for r in reports
        ]
    }


def write_summary_json(path: str | Path, summary: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path
