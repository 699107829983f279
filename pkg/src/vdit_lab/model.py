"""A small deterministic video DiT driven by the instrumented attention kernel."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .attention import AttentionConfig, AttentionIntervention, AttentionRecord, attend_heads
from .capture import CaptureFilter, CaptureStore
from .errors import ConfigError, NotApplicableError, ShapeError
from .layout import TokenLayout

# (layer, step) -> intervention; step None applies at every step
Interventions = Mapping[tuple[int, Optional[int]], AttentionIntervention]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    num_heads: int = 4
    head_dim: int = 16
    num_frames: int = 4
    height: int = 8
    width: int = 8
    num_text: int = 4
    text_position: str = "suffix"
    attention_mode: str = "joint"
    latent_channels: int = 4
    text_dim: int = 32
    mlp_ratio: int = 4
    steps: int = 16
    sigma_max: float = 2.0
    seed: int = 0
    hidden_width: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "latent_channels", "text_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0 or not self.sigma_max > 0:
            raise ConfigError("steps must be >= 0 and sigma_max > 0")
        if self.attention_mode not in ("joint", "self"):
            raise ConfigError(f"attention_mode must be 'joint' or 'self', got {self.attention_mode!r}")
        if self.hidden_width is not None and self.hidden_width != self.num_heads * self.head_dim:
            raise ConfigError(
                f"hidden_width {self.hidden_width} != num_heads * head_dim = {self.num_heads * self.head_dim}"
            )
        object.__setattr__(self, "hidden_width", self.num_heads * self.head_dim)
        self.layout  # validates the grid

    @property
    def width_hidden(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(self.num_frames, self.height, self.width, self.num_text, self.text_position)

    @property
    def attention_layout(self) -> TokenLayout:
        """Layout of the sequence the attention maps cover."""
        return self.layout if self.attention_mode == "joint" else self.layout.without_text()

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.num_frames, self.height, self.width, self.latent_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class DenoiseSchedule:
    sigmas: tuple[float, ...]

    def __post_init__(self):
        s = tuple(float(x) for x in self.sigmas)
        object.__setattr__(self, "sigmas", s)
        if not s:
            raise ConfigError("schedule needs at least one noise level")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ConfigError("noise levels must be strictly decreasing")
        if s[-1] < 0:
            raise ConfigError("final noise level must be >= 0")

    @classmethod
    def linear(cls, steps: int, sigma_max: float = 2.0) -> "DenoiseSchedule":
        if steps == 0:
            return cls((float(sigma_max),))
        return cls(tuple(float(sigma_max) * (1.0 - i / steps) for i in range(steps + 1)))

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    def describe(self) -> dict:
        return {"kind": "explicit", "sigmas": list(self.sigmas)}

    @classmethod
    def from_description(cls, d: Mapping) -> "DenoiseSchedule":
        return cls(tuple(d["sigmas"]))


def default_schedule(config: ModelConfig) -> DenoiseSchedule:
    return DenoiseSchedule.linear(config.steps, config.sigma_max)


def _gaussian(rng: np.random.Generator, shape, std: float) -> torch.Tensor:
    return torch.from_numpy((rng.standard_normal(shape) * std).astype(np.float32))


def sinusoid(x: torch.Tensor, dim: int, max_period: float = 100.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = x.double()[..., None] * freqs
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = torch.cat([out, torch.zeros(*out.shape[:-1], 1, dtype=out.dtype)], dim=-1)
    return out


def position_table(layout: TokenLayout, dim: int) -> torch.Tensor:
    """Fixed factorized (frame, row, col) sinusoids, one row per vision token."""
    f, r, c = np.meshgrid(np.arange(layout.num_frames), np.arange(layout.height), np.arange(layout.width), indexing="ij")
    parts = [dim // 3, dim // 3, dim - 2 * (dim // 3)]
    cols = [sinusoid(torch.from_numpy(a.ravel()).double(), p, max_period=32.0) for a, p in zip((f, r, c), parts)]
    return torch.cat(cols, dim=-1).float()


class Block(nn.Module):
    def __init__(self, width: int, heads: int, head_dim: int, mlp_ratio: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x, config: AttentionConfig, intervention=None, capture=None):
        B, n, W = x.shape
        qkv = self.qkv(self.ln1(x)).view(B, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        out, maps = attend_heads(q, k, v, config, intervention)
        if capture is not None:
            capture(maps, v)
        x = x + self.proj(out.transpose(1, 2).reshape(B, n, W))
        return x + self.fc2(nn.functional.gelu(self.fc1(self.ln2(x))))


class ToyVDiT(nn.Module):
    """Pre-norm DiT over ``F x H x W`` latent tokens plus text tokens.

    ``attention_mode="joint"`` attends over the concatenated ``[vision; text]``
    sequence; ``"self"`` attends over vision only and adds pooled text to every
    vision token instead.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        W = config.width_hidden
        self.in_proj = nn.Linear(config.latent_channels, W)
        self.text_proj = nn.Linear(config.text_dim, W)
        self.time_fc1 = nn.Linear(W, W)
        self.time_fc2 = nn.Linear(W, W)
        self.blocks = nn.ModuleList(
            Block(W, config.num_heads, config.head_dim, config.mlp_ratio) for _ in range(config.num_layers)
        )
        self.final_ln = nn.LayerNorm(W)
        self.out_proj = nn.Linear(W, config.latent_channels)
        self.register_buffer("pos", position_table(config.layout, W), persistent=False)
        self.map_dtype = torch.float32
        init_parameters(self, config.seed)

    @property
    def attention_layout(self) -> TokenLayout:
        return self.config.attention_layout

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.config.num_heads, self.config.head_dim, map_dtype=self.map_dtype)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        sigma: torch.Tensor,
        interventions: Mapping[int, AttentionIntervention] | None = None,
        capture: Callable[[int, torch.Tensor, torch.Tensor], None] | None = None,
    ) -> torch.Tensor:
        """Predict the noise in ``x`` (``[B, F, H, W, C]``) at level ``sigma`` (``[B]``).

        ``interventions`` is keyed by layer; ``capture(layer, maps, v)`` sees
        every layer's post-intervention maps.
        """
        cfg = self.config
        if tuple(x.shape[1:]) != cfg.latent_shape:
            raise ShapeError(f"latent shape {tuple(x.shape[1:])} != {cfg.latent_shape}")
        if tuple(text.shape[1:]) != (cfg.num_text, cfg.text_dim):
            raise ShapeError(f"text shape {tuple(text.shape[1:])} != {(cfg.num_text, cfg.text_dim)}")
        B, dt = x.shape[0], self.in_proj.weight.dtype
        W = cfg.width_hidden
        temb = sinusoid(sigma * 50.0, W).to(dt)
        temb = self.time_fc2(nn.functional.silu(self.time_fc1(temb)))[:, None, :]
        vis = self.in_proj(x.reshape(B, -1, cfg.latent_channels)) + self.pos.to(dt) + temb
        if cfg.attention_mode == "joint":
            txt = self.text_proj(text) + temb
            h = torch.cat([vis, txt] if cfg.text_position == "suffix" else [txt, vis], dim=1)
        else:
            if cfg.num_text:
                vis = vis + self.text_proj(text).mean(dim=1, keepdim=True)
            h = vis
        acfg = self.attention_config()
        ivs = interventions or {}
        for i, block in enumerate(self.blocks):
            cap = None if capture is None else (lambda maps, v, i=i: capture(i, maps, v))
            h = block(h, acfg, ivs.get(i), cap)
        h = self.final_ln(h)[:, self.attention_layout.vision_slice()]
        return self.out_proj(h).reshape(x.shape)


def _param_groups(model: ToyVDiT) -> list[tuple[tuple[int, ...], list[tuple[str, nn.Parameter]]]]:
    """Parameters grouped by RNG stream: (0, i) for block i, (1,) for I/O."""
    groups = [((0, i), list(b.named_parameters())) for i, b in enumerate(model.blocks)]
    io = [(n, p) for n, p in model.named_parameters() if not n.startswith("blocks.")]
    return groups + [((1,), io)]


def _init_group(params: list[tuple[str, nn.Parameter]], rng: np.random.Generator) -> None:
    with torch.no_grad():
        for name, p in params:
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:  # layer-norm gain
                p.fill_(1.0)
            else:
                p.copy_(_gaussian(rng, tuple(p.shape), 1.0 / math.sqrt(p.shape[1])))


def init_parameters(model: ToyVDiT, seed: int) -> None:
    for key, params in _param_groups(model):
        _init_group(params, np.random.default_rng([seed, 0, *key]))


def build_model(config: ModelConfig) -> ToyVDiT:
    model = ToyVDiT(config)
    model.eval()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def clone_model(model: ToyVDiT) -> ToyVDiT:
    return copy.deepcopy(model)


def reinit_layers(model: ToyVDiT, layers: Iterable[int], seed: int) -> ToyVDiT:
    """Redraw the listed blocks from the init distribution, in place."""
    layers = sorted(set(int(l) for l in layers))
    bad = [l for l in layers if not 0 <= l < model.config.num_layers]
    if bad:
        raise ConfigError(f"layers {bad} out of range for {model.config.num_layers} layers")
    for l in layers:
        _init_group(list(model.blocks[l].named_parameters()), np.random.default_rng([seed, 1, 0, l]))
    return model


def make_noise(config: ModelConfig, noise_seed: int, sigma: float | None = None) -> torch.Tensor:
    sigma = config.sigma_max if sigma is None else sigma
    rng = np.random.default_rng([noise_seed, 7])
    return torch.from_numpy((rng.standard_normal(config.latent_shape) * sigma).astype(np.float32))


def prompt_embedding(config: ModelConfig, prompt_seed: int) -> torch.Tensor:
    """Deterministic stand-in for a text encoder's output."""
    rng = np.random.default_rng([prompt_seed, 11])
    return torch.from_numpy(rng.standard_normal((config.num_text, config.text_dim)).astype(np.float32))


def first_token_only(text):
    """Keep text token 0, zero the rest (length preserved)."""
    if text.shape[-2] == 0:
        raise NotApplicableError("no text tokens to ablate")
    out = text.clone() if isinstance(text, torch.Tensor) else np.array(text, copy=True)
    out[..., 1:, :] = 0
    return out


def _resolve(interventions: Interventions | None, num_layers: int, step: int) -> dict[int, AttentionIntervention]:
    if not interventions:
        return {}
    out = {}
    for (layer, s), iv in interventions.items():
        if s is None or s == step:
            if layer in out and s is None:
                continue  # a step-specific entry wins over the wildcard
            out[layer] = iv
    return out


def validate_interventions(interventions: Interventions | None, model: ToyVDiT, steps: int) -> None:
    for key in interventions or {}:
        layer, step = key
        if not 0 <= layer < model.config.num_layers:
            raise ConfigError(f"intervention references layer {layer}; model has {model.config.num_layers}")
        if step is not None and not 0 <= step < max(steps, 1):
            raise ConfigError(f"intervention references step {step}; schedule has {steps}")
        iv = interventions[key]
        bad = [h for h in iv.skip_heads if not 0 <= h < model.config.num_heads]
        if bad:
            raise ConfigError(f"skip heads {bad} out of range")


def describe_interventions(interventions: Interventions | None) -> list[dict]:
    rows = []
    for (layer, step), iv in sorted((interventions or {}).items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
        rows.append({"layer": layer, "step": step, **iv.describe()})
    return rows


@torch.no_grad()
def denoise(
    model: ToyVDiT,
    noise: torch.Tensor,
    text: torch.Tensor,
    schedule: DenoiseSchedule,
    interventions: Interventions | None = None,
    capture: CaptureFilter | None = None,
    collector=None,
) -> tuple[torch.Tensor, list[AttentionRecord]]:
    """Deterministic Euler sampler ``x <- x + (sigma_next - sigma) * eps_hat``.

    Returns the final latents and the records selected by ``capture``.  A
    custom ``collector`` (anything with ``add(record)``) replaces the default
    in-memory store; the returned record list is then whatever it exposes as
    ``records`` (possibly empty).
    """
    cfg = model.config
    if tuple(noise.shape) != cfg.latent_shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != {cfg.latent_shape}")
    validate_interventions(interventions, model, schedule.steps)
    store = collector if collector is not None else CaptureStore()
    x = noise.clone()[None]
    txt = text[None]
    for step in range(schedule.steps):
        sigma, nxt = schedule.sigmas[step], schedule.sigmas[step + 1]
        cap = None
        if capture is not None and capture.wants_step(step):
            def cap(layer, maps, v, step=step):
                if not capture.wants_layer(layer):
                    return
                for head in range(maps.shape[1]):
                    if capture.wants_head(head):
                        vals = v[0, head].float().numpy().copy() if capture.values else None
                        store.add(AttentionRecord(layer, head, step, maps[0, head].float().numpy().copy(), vals,
                                                  validate=capture.validate))
        eps = model(x, txt, torch.full((1,), sigma, dtype=torch.float64), _resolve(interventions, cfg.num_layers, step), cap)
        x = x + torch.tensor(nxt - sigma, dtype=x.dtype) * eps
    return x[0], list(getattr(store, "records", []))


def latent_mse(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.mean((a.double() - b.double()) ** 2))


def latent_psnr(mse: float, reference: torch.Tensor) -> float:
    if mse == 0:
        return math.inf
    peak = float(reference.max() - reference.min())
    return 10.0 * math.log10(peak * peak / mse)
