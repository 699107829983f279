"""Freeze-and-retrain: AdamW with linear warmup, EMA tracking, eps-prediction loss."""
from __future__ import annotations

import copy
import math
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, TrainingDivergedError
from .model import DenoiseSchedule, ModelConfig, ToyVDiT, default_schedule

_EMBED_SALT = 1234


@dataclass(frozen=True)
class TrainingConfig:
    trainable_layers: frozenset[int]
    train_io: bool = False  # embeddings, time MLP and output head
    lr: float = 1e-3
    warmup_steps: int = 20
    ema_beta: float = 0.99
    batch_size: int = 4
    total_steps: int = 500
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trainable_layers", frozenset(int(l) for l in self.trainable_layers))
        if not 0 < self.ema_beta < 1:
            raise ConfigError(f"ema_beta must lie in (0, 1), got {self.ema_beta}")
        if self.lr <= 0 or self.warmup_steps < 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("lr > 0, warmup >= 0, batch_size >= 1, total_steps >= 0 required")

    def lr_at(self, step: int) -> float:
        """Linear ramp over the warmup steps, constant afterwards (0-indexed)."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


class EMA:
    """Shadow copy of selected parameters, ``avg <- beta * avg + (1 - beta) * p``."""

    def __init__(self, params: dict[str, torch.Tensor], beta: float):
        if not 0 < beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {beta}")
        self.beta = beta
        self.shadow = {k: v.detach().clone() for k, v in params.items()}

    @torch.no_grad()
    def update(self, params: dict[str, torch.Tensor]) -> None:
        for k, avg in self.shadow.items():
            avg.mul_(self.beta).add_(params[k].detach(), alpha=1.0 - self.beta)


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def trainable_names(model: ToyVDiT, cfg: TrainingConfig) -> list[str]:
    names = []
    for name, _ in model.named_parameters():
        if name.startswith("blocks."):
            if int(name.split(".")[1]) in cfg.trainable_layers:
                names.append(name)
        elif cfg.train_io:
            names.append(name)
    return names


def diffusion_loss(model: ToyVDiT, x0: torch.Tensor, text: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error of the predicted noise at ``x0 + sigma * eps``."""
    s = sigma.to(x0.dtype).view(-1, *([1] * (x0.ndim - 1)))
    pred = model(x0 + s * eps, text, sigma)
    return torch.mean((pred - eps) ** 2)


def retrain(
    model: ToyVDiT,
    cfg: TrainingConfig,
    dataset: Iterable[tuple[torch.Tensor, torch.Tensor]],
    schedule: DenoiseSchedule | None = None,
    on_step: Callable[[int, ToyVDiT, EMA], None] | None = None,
) -> tuple[ToyVDiT, ToyVDiT, TrainTrace]:
    """Train the selected layers in place; everything else stays frozen.

    Returns ``(model, ema_model, trace)``.  Noise levels are drawn uniformly
    from the positive levels of ``schedule``.  ``on_step(step, model, ema)``
    runs after each optimizer and EMA update.
    """
    names = trainable_names(model, cfg)
    if not names:
        raise ConfigError("trainable set is empty")
    bad = [l for l in cfg.trainable_layers if not 0 <= l < model.config.num_layers]
    if bad:
        raise ConfigError(f"trainable layers {bad} out of range")
    schedule = schedule or default_schedule(model.config)
    levels = np.array([s for s in schedule.sigmas if s > 0])
    if levels.size == 0:
        raise ConfigError("schedule has no positive noise level")

    params = dict(model.named_parameters())
    trainable = {n: params[n] for n in names}
    flags = {n: p.requires_grad for n, p in params.items()}
    for n, p in params.items():
        p.requires_grad_(n in trainable)

    ema = EMA(trainable, cfg.ema_beta)
    trace = TrainTrace()
    opt = torch.optim.AdamW(list(trainable.values()), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 3])
    it: Iterator = iter(dataset)
    was_training = model.training
    model.train()
    try:
        for step in range(cfg.total_steps):
            x0, text = _next_batch(it, cfg.batch_size, step)
            sigma = torch.from_numpy(rng.choice(levels, size=cfg.batch_size))
            eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)).astype(np.float32))
            lr = cfg.lr_at(step)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss = diffusion_loss(model, x0, text, sigma, eps)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            loss.backward()
            opt.step()
            ema.update(trainable)
            trace.losses.append(value)
            trace.lrs.append(lr)
            if on_step is not None:
                on_step(step, model, ema)
    finally:
        model.train(was_training)
        for n, p in params.items():
            p.requires_grad_(flags[n])

    ema_model = copy.deepcopy(model)
    with torch.no_grad():
        for n, p in ema_model.named_parameters():
            if n in ema.shadow:
                p.copy_(ema.shadow[n])
    return model, ema_model, trace


def _next_batch(it: Iterator, size: int, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ts = [], []
    for _ in range(size):
        try:
            x, t = next(it)
        except StopIteration:
            raise ConfigError(f"dataset exhausted at training step {step}") from None
        xs.append(torch.as_tensor(x))
        ts.append(torch.as_tensor(t))
    return torch.stack(xs), torch.stack(ts)


def square_position(start: tuple[int, int], velocity: tuple[int, int], frame: int, height: int, width: int) -> tuple[int, int]:
    return ((start[0] + velocity[0] * frame) % height, (start[1] + velocity[1] * frame) % width)


def render_square_video(config: ModelConfig, start: tuple[int, int], velocity: tuple[int, int],
                        size: int | None = None, bright: float = 1.0, dark: float = -0.5) -> torch.Tensor:
    """Latent video of a ``size x size`` square moving with wrap-around."""
    F, H, W, C = config.latent_shape
    size = size or max(1, min(H, W) // 4)
    video = np.full((F, H, W, C), dark, dtype=np.float32)
    for f in range(F):
        r0, c0 = square_position(start, velocity, f, H, W)
        rows = (r0 + np.arange(size)) % H
        cols = (c0 + np.arange(size)) % W
        video[f][np.ix_(rows, cols)] = bright
    return torch.from_numpy(video)


def square_embedding(config: ModelConfig, start: tuple[int, int], velocity: tuple[int, int]) -> torch.Tensor:
    feats = np.array([velocity[0], velocity[1], start[0] / config.height, start[1] / config.width, 1.0])
    proj = np.random.default_rng(_EMBED_SALT).standard_normal((config.num_text, config.text_dim, feats.size))
    return torch.from_numpy(np.tanh(proj @ feats).astype(np.float32))


def synth_dataset(config: ModelConfig, seed: int, count: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """``count`` (latent video, text embedding) pairs of translating squares."""
    if count < 1:
        raise ConfigError(f"dataset needs count >= 1, got {count}")

    def gen():
        rng = np.random.default_rng([seed, 5])
        for _ in range(count):
            start = (int(rng.integers(config.height)), int(rng.integers(config.width)))
            velocity = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
            yield render_square_video(config, start, velocity), square_embedding(config, start, velocity)

    return gen()
