"""Attention-sink detection, value-norm profiling and head-skip ablations."""
from __future__ import annotations

import csv
import json
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionIntervention, AttentionRecord
from .capture import CaptureFilter
from .errors import ConfigError, ContractError, NotApplicableError
from .layout import TokenLayout
from .model import DenoiseSchedule, ToyVDiT, default_schedule, denoise, latent_mse, make_noise, prompt_embedding

RANDOM_SKIP_SALT = 0x51CC


@dataclass(frozen=True)
class SinkCriterion:
    """A key is a sink when more than ``tau_q`` of query rows give it weight >= ``tau_w``."""

    tau_w: float = 0.3
    tau_q: float = 0.5

    def __post_init__(self):
        if not (0 < self.tau_w <= 1 and 0 < self.tau_q <= 1):
            raise ConfigError(f"sink thresholds must lie in (0, 1], got tau_w={self.tau_w}, tau_q={self.tau_q}")


def detect_sinks(attn, criterion: SinkCriterion | None = None) -> int | None:
    """Sink key position of one map, or ``None``.

    Among qualifying keys the one with the largest heavy-query fraction wins;
    ties go to the lowest index.
    """
    criterion = criterion or SinkCriterion()
    m = attn.matrix if isinstance(attn, AttentionRecord) else np.asarray(attn)
    rows = m.shape[0]
    heavy = np.count_nonzero(m >= criterion.tau_w, axis=0)
    qualifies = heavy > criterion.tau_q * rows
    if not qualifies.any():
        return None
    return int(np.argmax(np.where(qualifies, heavy, -1)))


def value_norm_profile(values, position: int) -> tuple[float, float, float]:
    """``(sink row norm, mean norm of other rows, ratio)``."""
    v = values.detach().numpy() if isinstance(values, torch.Tensor) else np.asarray(values)
    n = v.shape[0]
    if n < 2:
        raise NotApplicableError("value-norm profile needs at least two rows")
    if not 0 <= position < n:
        raise ConfigError(f"position {position} outside 0..{n - 1}")
    norms = np.linalg.norm(v.astype(np.float64), axis=1)
    sink = float(norms[position])
    other = float(np.delete(norms, position).mean())
    if other == 0:
        ratio = 1.0 if sink == 0 else float("inf")
    else:
        ratio = sink / other
    return sink, other, ratio


@dataclass
class SinkReport:
    num_layers: int
    num_heads: int
    steps: int
    runs: int
    flags: list[dict[tuple[int, int, int], int]] = field(default_factory=list)
    head_frequency: dict[tuple[int, int], float] = field(default_factory=dict)
    step_frequency: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    value_norms: list[dict] = field(default_factory=list)
    spatial_histogram: dict = field(default_factory=dict)
    temporal_histogram: dict = field(default_factory=dict)

    @property
    def total_flags(self) -> int:
        return sum(len(f) for f in self.flags)

    def sink_heads(self, min_frequency: float = 0.5) -> list[tuple[int, int]]:
        return sorted(k for k, f in self.head_frequency.items() if f >= min_frequency and f > 0)

    def to_json(self) -> str:
        return json.dumps({
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "steps": self.steps,
            "runs": self.runs,
            "total_flags": self.total_flags,
            "flags": [[{"layer": l, "head": h, "step": s, "position": p} for (l, h, s), p in sorted(f.items())]
                      for f in self.flags],
            "head_frequency": {f"{l}:{h}": v for (l, h), v in sorted(self.head_frequency.items())},
            "value_norms": self.value_norms,
            "spatial_histogram": {_key(k): v for k, v in sorted(self.spatial_histogram.items(), key=lambda kv: str(kv[0]))},
            "temporal_histogram": {_key(k): v for k, v in sorted(self.temporal_histogram.items(), key=lambda kv: str(kv[0]))},
        }, indent=2, sort_keys=True)

    def write_frequency_csv(self, path: str | Path) -> Path:
        """Rows are ``layer:head``, columns denoising steps."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["head"] + [f"step{s}" for s in range(self.steps)])
            for l in range(self.num_layers):
                for h in range(self.num_heads):
                    row = self.step_frequency.get((l, h), [0.0] * self.steps)
                    w.writerow([f"{l}:{h}"] + [repr(float(x)) for x in row])
        return path

    def spatial_grid(self, layout: TokenLayout) -> np.ndarray:
        g = np.zeros((layout.height, layout.width))
        for k, v in self.spatial_histogram.items():
            if isinstance(k, tuple):
                g[k] = v
        return g

    def temporal_counts(self, layout: TokenLayout) -> np.ndarray:
        return np.array([self.temporal_histogram.get(f, 0) for f in range(layout.num_frames)], dtype=float)


def _key(k) -> str:
    return ",".join(map(str, k)) if isinstance(k, tuple) else str(k)


def sink_statistics(runs, layout: TokenLayout, criterion: SinkCriterion | None = None,
                    num_layers: int | None = None, num_heads: int | None = None, steps: int | None = None) -> SinkReport:
    """Aggregate :func:`detect_sinks` over records from one or more runs.

    ``runs`` is an iterable of record collections (one per prompt), consumed
    one run at a time; a flat sequence of records counts as a single run.
    Sinks landing on text tokens are tallied under the key ``"text"`` in both
    histograms.
    """
    criterion = criterion or SinkCriterion()
    if isinstance(runs, Sequence) and runs and isinstance(runs[0], AttentionRecord):
        runs = [runs]
    spatial: Counter = Counter()
    temporal: Counter = Counter()
    head_freq: dict[tuple[int, int], list[float]] = {}
    step_hits: Counter = Counter()
    step_seen: Counter = Counter()
    all_flags: list[dict] = []
    norms: list[dict] = []
    nrec = 0
    for run_idx, run in enumerate(runs):
        flags: dict[tuple[int, int, int], int] = {}
        seen: Counter = Counter()
        for rec in run:
            if rec.n != layout.n:
                raise ContractError(f"record n={rec.n} does not match layout n={layout.n}")
            nrec += 1
            seen[(rec.layer, rec.head)] += 1
            step_seen[rec.key] += 1
            pos = detect_sinks(rec, criterion)
            if pos is None:
                continue
            flags[rec.key] = pos
            step_hits[rec.key] += 1
            kind, coord = layout.unflatten(pos)
            if kind == "vision":
                temporal[coord[0]] += 1
                spatial[(coord[1], coord[2])] += 1
            else:
                temporal["text"] += 1
                spatial["text"] += 1
            if rec.values is not None:
                sink, other, ratio = value_norm_profile(rec.values, pos)
                norms.append({"run": run_idx, "layer": rec.layer, "head": rec.head, "step": rec.step,
                              "sink_norm": sink, "mean_other_norm": other, "ratio": ratio})
        all_flags.append(flags)
        hits = Counter((l, h) for (l, h, _s) in flags)
        for lh, total in seen.items():
            head_freq.setdefault(lh, []).append(hits[lh] / total)
    if nrec == 0:
        raise ContractError("sink statistics need at least one record")
    L = num_layers if num_layers is not None else 1 + max(k[0] for k in step_seen)
    H = num_heads if num_heads is not None else 1 + max(k[1] for k in step_seen)
    S = steps if steps is not None else 1 + max(k[2] for k in step_seen)
    report = SinkReport(L, H, S, len(all_flags), flags=all_flags, value_norms=norms)
    report.head_frequency = {lh: float(np.mean(v)) for lh, v in sorted(head_freq.items())}
    report.step_frequency = {
        (l, h): [step_hits[(l, h, s)] / step_seen[(l, h, s)] if step_seen[(l, h, s)] else 0.0 for s in range(S)]
        for l in range(L) for h in range(H)
    }
    report.spatial_histogram = dict(spatial)
    report.temporal_histogram = dict(temporal)
    return report


class SinkCollector:
    """Streaming capture collector: keeps flags, not maps."""

    def __init__(self, criterion: SinkCriterion):
        self.criterion = criterion
        self.flags: dict[tuple[int, int, int], int] = {}
        self.seen: Counter = Counter()

    def add(self, rec: AttentionRecord) -> None:
        self.seen[(rec.layer, rec.head)] += 1
        pos = detect_sinks(rec, self.criterion)
        if pos is not None:
            self.flags[rec.key] = pos

    def frequency(self) -> dict[tuple[int, int], float]:
        hits = Counter((l, h) for (l, h, _s) in self.flags)
        return {lh: hits[lh] / n for lh, n in sorted(self.seen.items())}


def detect_sink_heads(model: ToyVDiT, prompt_seed: int, schedule: DenoiseSchedule | None = None,
                      criterion: SinkCriterion | None = None, noise_seed: int = 0,
                      min_frequency: float = 0.5) -> tuple[list[tuple[int, int]], torch.Tensor]:
    """Heads flagged in at least ``min_frequency`` of baseline steps, plus the baseline latents."""
    cfg = model.config
    schedule = schedule or default_schedule(cfg)
    col = SinkCollector(criterion or SinkCriterion())
    latents, _ = denoise(model, make_noise(cfg, noise_seed), prompt_embedding(cfg, prompt_seed), schedule,
                         capture=CaptureFilter(validate=False), collector=col)
    heads = sorted(lh for lh, f in col.frequency().items() if f > 0 and f >= min_frequency)
    return heads, latents


def skip_interventions(heads: Iterable[tuple[int, int]]) -> dict:
    by_layer: dict[int, set[int]] = {}
    for l, h in heads:
        by_layer.setdefault(l, set()).add(h)
    return {(l, None): AttentionIntervention(skip_heads=frozenset(hs)) for l, hs in sorted(by_layer.items())}


@dataclass
class SkipResult:
    mode: str
    latents: torch.Tensor
    mse: float
    skipped: list[tuple[int, int]]
    total_heads: int

    @property
    def count(self) -> int:
        return len(self.skipped)

    @property
    def fraction(self) -> float:
        return self.count / self.total_heads


def skip_heads_run(
    model: ToyVDiT,
    prompt_seed: int,
    mode: str = "detected_sinks",
    heads: Iterable[tuple[int, int]] | None = None,
    count: int | None = None,
    schedule: DenoiseSchedule | None = None,
    criterion: SinkCriterion | None = None,
    noise_seed: int = 0,
    seed: int = 0,
    min_frequency: float = 0.5,
) -> SkipResult:
    """Zero a set of heads for the whole run and compare against the baseline.

    ``detected_sinks`` skips ``heads`` when given, else the heads found by
    :func:`detect_sink_heads`.  ``random_matched`` skips ``count`` (default:
    as many as were detected) heads drawn uniformly from the non-sink heads.
    """
    cfg = model.config
    schedule = schedule or default_schedule(cfg)
    total = cfg.num_layers * cfg.num_heads
    detected, baseline = detect_sink_heads(model, prompt_seed, schedule, criterion, noise_seed, min_frequency)
    if mode == "detected_sinks":
        chosen = sorted(set(heads)) if heads is not None else detected
    elif mode == "random_matched":
        sinks = set(detected) if heads is None else set(heads) | set(detected)
        count = len(detected if heads is None else set(heads)) if count is None else count
        pool = [(l, h) for l in range(cfg.num_layers) for h in range(cfg.num_heads) if (l, h) not in sinks]
        if count > len(pool):
            raise ConfigError(f"asked to skip {count} random heads but only {len(pool)} non-sink heads exist")
        rng = np.random.default_rng([seed, RANDOM_SKIP_SALT])
        chosen = sorted(pool[i] for i in rng.choice(len(pool), size=count, replace=False))
    else:
        raise ConfigError(f"unknown skip mode {mode!r}")
    bad = [lh for lh in chosen if not (0 <= lh[0] < cfg.num_layers and 0 <= lh[1] < cfg.num_heads)]
    if bad:
        raise ConfigError(f"heads {bad} out of range")
    text = prompt_embedding(cfg, prompt_seed)
    latents, _ = denoise(model, make_noise(cfg, noise_seed), text, schedule, interventions=skip_interventions(chosen))
    return SkipResult(mode, latents, latent_mse(latents, baseline), chosen, total)


@torch.no_grad()
def plant_sink_head(model: ToyVDiT, layer: int, head: int, scale: float = 40.0, seed: int = 0) -> ToyVDiT:
    """Make one head a sink, in place: every query becomes the same vector, so
    all rows share one argmax key and the map collapses to a vertical line."""
    cfg = model.config
    W, D = cfg.width_hidden, cfg.head_dim
    qkv = model.blocks[layer].qkv
    rows = slice(head * D, (head + 1) * D)
    u = np.random.default_rng([seed, layer, head]).standard_normal(D)
    u /= np.linalg.norm(u)
    qkv.weight[rows] = 0.0
    qkv.bias[rows] = torch.from_numpy((scale * u).astype(np.float32))
    return model
