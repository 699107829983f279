"""Instrumented multi-head bidirectional attention.

Every experiment in the lab funnels through :func:`attend_heads`; the
single-head :func:`attend` is a thin view over it.  Logits and softmax run in
float64, the map that multiplies ``V`` is quantized to ``map_dtype`` first so
that a captured float32 map, fed back as an override, reproduces the output
bit for bit.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
import torch

from .errors import ConfigError, ContractError, DegenerateRowError, NumericError, ShapeError

PerHead = Union[float, Mapping[int, float]]

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    head_dim: int
    temperature: float | tuple[float, ...] = 1.0
    map_dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError(f"num_heads and head_dim must be >= 1, got {self.num_heads}, {self.head_dim}")
        temps = self.temperatures()
        if len(temps) != self.num_heads:
            raise ConfigError(f"{len(temps)} temperatures for {self.num_heads} heads")
        if not all(t > 0 and math.isfinite(t) for t in temps):
            raise ConfigError(f"temperatures must be positive, got {temps}")

    def temperatures(self) -> tuple[float, ...]:
        if isinstance(self.temperature, (int, float)):
            return (float(self.temperature),) * self.num_heads
        return tuple(float(t) for t in self.temperature)


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """One captured post-intervention map for a (layer, head, step)."""

    layer: int
    head: int
    step: int
    matrix: np.ndarray
    values: np.ndarray | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"attention map must be square, got {m.shape}")
        if self.validate:
            check_row_stochastic(m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dtype(self) -> str:
        return str(self.matrix.dtype)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.layer, self.head, self.step)


@dataclass(frozen=True, eq=False)
class AttentionIntervention:
    """Override bundle for one layer at one step.

    Per-head fields take either a scalar (all heads) or a ``{head: value}``
    mapping.  ``mask_fraction`` thresholds each head's map at its own lower
    ``k``-quantile on the fly; ``mask_threshold`` uses a fixed value.
    """

    temperature: PerHead | None = None
    mask_threshold: PerHead | None = None
    mask_fraction: PerHead | None = None
    skip_heads: frozenset[int] = frozenset()
    map_override: Any = None
    renormalize: bool = True
    strict: bool = False

    def __post_init__(self):
        object.__setattr__(self, "skip_heads", frozenset(int(h) for h in self.skip_heads))
        for t in _values(self.temperature):
            if not (t > 0 and math.isfinite(t)):
                raise ConfigError(f"temperature must be positive, got {t}")
        for t in _values(self.mask_threshold):
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"mask threshold must lie in [0, 1], got {t}")
        for k in _values(self.mask_fraction):
            if not 0.0 <= k < 1.0:
                raise ConfigError(f"mask fraction must lie in [0, 1), got {k}")
        if self.mask_threshold is not None and self.mask_fraction is not None:
            raise ConfigError("give mask_threshold or mask_fraction, not both")

    @property
    def is_neutral(self) -> bool:
        return (
            all(t == 1.0 for t in _values(self.temperature))
            and self.mask_threshold is None
            and self.mask_fraction is None
            and not self.skip_heads
            and self.map_override is None
        )

    def describe(self) -> dict:
        d: dict[str, Any] = {}
        for name in ("temperature", "mask_threshold", "mask_fraction"):
            v = getattr(self, name)
            if v is not None:
                d[name] = dict(sorted((str(h), x) for h, x in v.items())) if isinstance(v, Mapping) else v
        if self.skip_heads:
            d["skip_heads"] = sorted(self.skip_heads)
        if self.map_override is not None:
            d["map_override_heads"] = sorted(self.override_maps(None).keys()) if isinstance(self.map_override, Mapping) else "all"
        if not self.renormalize:
            d["renormalize"] = False
        return d

    def override_maps(self, num_heads: int | None) -> dict[int, Any]:
        ov = self.map_override
        if ov is None:
            return {}
        if isinstance(ov, Mapping):
            return {int(h): m for h, m in ov.items()}
        if isinstance(ov, AttentionRecord):
            ov = ov.matrix
        if ov.ndim == 3:
            return {h: ov[h] for h in range(ov.shape[0])}
        if num_heads is None:
            raise ConfigError("a single 2-D override needs a head count")
        return {h: ov for h in range(num_heads)}


def _values(v: PerHead | None) -> list[float]:
    if v is None:
        return []
    if isinstance(v, Mapping):
        return [float(x) for x in v.values()]
    return [float(v)]


def _per_head(v: PerHead | None, num_heads: int, default: float) -> torch.Tensor:
    out = torch.full((num_heads,), default, dtype=torch.float64)
    if v is None:
        return out
    if isinstance(v, Mapping):
        for h, x in v.items():
            if not 0 <= int(h) < num_heads:
                raise ConfigError(f"head {h} out of range for {num_heads} heads")
            out[int(h)] = float(x)
        return out
    return out.fill_(float(v))


NEUTRAL = AttentionIntervention()


def check_row_stochastic(m: np.ndarray | torch.Tensor, tol: float = ROW_SUM_TOL) -> None:
    a = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
    if not np.all(np.isfinite(a)):
        raise ContractError("attention map has non-finite entries")
    if a.min(initial=0.0) < 0 or a.max(initial=0.0) > 1:
        raise ContractError("attention map entries must lie in [0, 1]")
    err = np.abs(a.sum(axis=-1, dtype=np.float64) - 1.0).max(initial=0.0)
    if err > tol:
        raise ContractError(f"attention map rows deviate from 1 by {err:.3g}")


def lower_quantile(flat: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Tie-kept lower empirical quantile along the last axis.

    Returns ``q`` such that ``flat < q`` selects the largest prefix of the
    sorted values whose size is at most ``floor(k * N)``.
    """
    n = flat.shape[-1]
    k = torch.as_tensor(k, dtype=torch.float64)
    idx = torch.floor(k * n + 1e-9).long().clamp_(0, n - 1)
    srt = torch.sort(flat, dim=-1).values
    idx = idx.expand(srt.shape[:-1]).unsqueeze(-1)
    return torch.gather(srt, -1, idx).squeeze(-1)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.ascontiguousarray(x))


def attend_heads(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    config: AttentionConfig,
    intervention: AttentionIntervention | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-head attention over ``[..., heads, n, d]`` inputs.

    Returns ``(output, maps)`` where ``maps`` has shape ``[..., heads, n, n]``
    and dtype ``config.map_dtype``.  Skipped heads produce zero output.
    """
    iv = intervention or NEUTRAL
    if q.ndim < 3 or q.shape[:-1] != k.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"Q {tuple(q.shape)} and K {tuple(k.shape)} disagree")
    if v.shape[:-1] != k.shape[:-1]:
        raise ShapeError(f"V {tuple(v.shape)} does not match K {tuple(k.shape)}")
    h, n, d = q.shape[-3:]
    if h != config.num_heads:
        raise ShapeError(f"expected {config.num_heads} heads, got {h}")
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise NumericError(f"{name} has non-finite entries")

    if iv.temperature is None:
        temps = torch.tensor(config.temperatures(), dtype=torch.float64)
    else:
        temps = _per_head(iv.temperature, h, 1.0)
    denom = (math.sqrt(d) * temps).view(h, 1, 1)
    logits = (q.double() @ k.double().transpose(-1, -2)) / denom
    probs = torch.softmax(logits, dim=-1)

    if iv.mask_threshold is not None or iv.mask_fraction is not None:
        probs = _apply_mask(probs, iv, config.map_dtype)

    maps = probs.to(config.map_dtype)
    overrides = iv.override_maps(h)
    if overrides:
        maps = maps.clone()
        for hd, m in overrides.items():
            if not 0 <= hd < h:
                raise ConfigError(f"override for head {hd} out of range")
            m = _as_tensor(m)
            if tuple(m.shape) != (n, n):
                raise ShapeError(f"override for head {hd} has shape {tuple(m.shape)}, expected {(n, n)}")
            check_row_stochastic(m)
            maps[..., hd, :, :] = m.to(config.map_dtype)

    out = (maps.double() @ v.double()).to(v.dtype)
    if iv.skip_heads:
        bad = [s for s in iv.skip_heads if not 0 <= s < h]
        if bad:
            raise ConfigError(f"skip heads {bad} out of range for {h} heads")
        skip = torch.zeros(h, dtype=torch.bool)
        skip[list(iv.skip_heads)] = True
        out = torch.where(skip.view(h, 1, 1), torch.zeros((), dtype=out.dtype), out)
    return out, maps


def _apply_mask(probs: torch.Tensor, iv: AttentionIntervention, map_dtype: torch.dtype) -> torch.Tensor:
    h, n = probs.shape[-3], probs.shape[-1]
    if iv.mask_fraction is not None:
        ks = _per_head(iv.mask_fraction, h, 0.0)
        flat = probs.detach().reshape(*probs.shape[:-2], n * n)
        thr = lower_quantile(flat, ks)
        active = ks > 0
        cmp = probs
    else:
        thr = _per_head(iv.mask_threshold, h, 0.0).expand(probs.shape[:-2])
        active = torch.ones(h, dtype=torch.bool) if not isinstance(iv.mask_threshold, Mapping) else _has_key(iv.mask_threshold, h)
        # fixed thresholds come from captured maps, so compare in their precision
        cmp = probs.to(map_dtype).double()
    thr = thr.unsqueeze(-1).unsqueeze(-1)
    keep = (cmp >= thr) | ~active.view(h, 1, 1)
    degenerate = ~keep.any(dim=-1)
    if degenerate.any():
        if iv.strict:
            idx = degenerate.nonzero()[0].tolist()
            raise DegenerateRowError(row=idx[-1], head=idx[-2])
        top = torch.nn.functional.one_hot(probs.argmax(dim=-1), n).bool()
        keep = keep | (top & degenerate.unsqueeze(-1))
    changed = (~keep).any(dim=-1, keepdim=True)
    masked = torch.where(keep, probs, torch.zeros((), dtype=probs.dtype))
    if iv.renormalize:
        masked = torch.where(changed, masked / masked.sum(dim=-1, keepdim=True), masked)
    return masked


def _has_key(m: Mapping, h: int) -> torch.Tensor:
    out = torch.zeros(h, dtype=torch.bool)
    for k in m:
        out[int(k)] = True
    return out


def attend(q, k, v, config: AttentionConfig | None = None, intervention: AttentionIntervention | None = None, *,
           layer: int = 0, head: int = 0, step: int = 0):
    """Single-head attention on ``n x d`` arrays.

    ``head`` selects which per-head entries of ``config`` and ``intervention``
    apply.  Returns ``(output, AttentionRecord)``; output matches the input
    array type (numpy in, numpy out).
    """
    as_numpy = not isinstance(q, torch.Tensor)
    qt, kt, vt = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if qt.ndim != 2 or kt.ndim != 2 or vt.ndim != 2:
        raise ShapeError("attend expects 2-D Q, K, V")
    if config is None:
        config = AttentionConfig(num_heads=1, head_dim=qt.shape[1])
    iv = _select_head(intervention or NEUTRAL, head, config)
    cfg1 = AttentionConfig(1, config.head_dim, config.temperatures()[head], config.map_dtype)
    out, maps = attend_heads(qt[None], kt[None], vt[None], cfg1, iv)
    rec = AttentionRecord(layer, head, step, maps[0].detach().numpy().astype(np.float32, copy=False))
    out = out[0]
    return (out.detach().numpy() if as_numpy else out), rec


def _select_head(iv: AttentionIntervention, head: int, config: AttentionConfig) -> AttentionIntervention:
    def pick(v):
        if isinstance(v, Mapping):
            return v.get(head)
        return v

    ov = iv.map_override
    if isinstance(ov, Mapping):
        ov = ov.get(head)
    elif ov is not None and getattr(ov, "ndim", 2) == 3:
        ov = ov[head]
    return AttentionIntervention(
        temperature=pick(iv.temperature),
        mask_threshold=pick(iv.mask_threshold),
        mask_fraction=pick(iv.mask_fraction),
        skip_heads=frozenset({0}) if head in iv.skip_heads else frozenset(),
        map_override=ov,
        renormalize=iv.renormalize,
        strict=iv.strict,
    )


def row_entropy(attn) -> np.ndarray:
    """Shannon entropy (nats) of each row; ``0 log 0`` counts as 0."""
    m = attn.matrix if isinstance(attn, AttentionRecord) else attn
    m = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
    check_row_stochastic(m, tol=1e-5)
    p = m.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)
