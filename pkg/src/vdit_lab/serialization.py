"""Binary checkpoint (TVDT) and attention-trace (ATRC) files, JSON run manifests.

All multi-byte fields are little-endian.

TVDT layout::

    4s magic | u32 version | 12 x u32 config ints | u8 text_position | u8 attention_mode
    | u64 seed | f64 sigma_max | u64 param_count | param_count x f32 (declaration order)

ATRC layout::

    4s magic | u32 version | u32 F, H, W, T_text | u8 text_position
    | u32 num_layers, num_heads, steps, n | filter bitmap (ceil(L*heads*steps / 8) bytes,
    bit (step*L + layer)*heads + head, LSB first) | u32 manifest length | manifest JSON
    | records in (step, layer, head) order, n*n f32 row-major each
    | u8 has_latents [| u32 ndim | ndim x u32 shape | f32 data]
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
import torch

from . import __version__
from .errors import ConfigError, ShapeError
from .layout import TokenLayout
from .model import ModelConfig, ToyVDiT, build_model

TVDT_MAGIC = b"TVDT"
ATRC_MAGIC = b"ATRC"
FORMAT_VERSION = 1

_CFG_INTS = ("num_layers", "num_heads", "head_dim", "num_frames", "height", "width", "num_text",
             "latent_channels", "text_dim", "mlp_ratio", "steps", "hidden_width")
_TEXT_POS = ("prefix", "suffix")
_MODES = ("joint", "self")
_TVDT_HEAD = struct.Struct("<4sI" + "I" * len(_CFG_INTS) + "BBQdQ")


@dataclass
class RunManifest:
    config_hash: str
    param_seed: int
    noise_seed: int
    prompt_seed: int
    schedule: dict
    interventions: list = field(default_factory=list)
    artifact_version: str = __version__
    model_config: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# --- checkpoints -------------------------------------------------------------

def model_bytes(model: ToyVDiT) -> bytes:
    cfg = model.config
    d = cfg.to_dict()
    params = [p.detach().to(torch.float32).numpy().astype("<f4").ravel() for p in model.parameters()]
    count = sum(p.size for p in params)
    head = _TVDT_HEAD.pack(TVDT_MAGIC, FORMAT_VERSION, *(int(d[k]) for k in _CFG_INTS),
                           _TEXT_POS.index(cfg.text_position), _MODES.index(cfg.attention_mode),
                           cfg.seed, float(cfg.sigma_max), count)
    return head + b"".join(p.tobytes() for p in params)


def save_checkpoint(model: ToyVDiT, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(model_bytes(model))
    return path


def load_checkpoint(path: str | Path) -> ToyVDiT:
    data = Path(path).read_bytes()
    if len(data) < _TVDT_HEAD.size or data[:4] != TVDT_MAGIC:
        raise ConfigError(f"{path} is not a TVDT checkpoint")
    fields = _TVDT_HEAD.unpack_from(data)
    _, version, *rest = fields
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    ints = dict(zip(_CFG_INTS, rest[: len(_CFG_INTS)]))
    tpos, mode, seed, sigma_max, count = rest[len(_CFG_INTS):]
    cfg = ModelConfig(**ints, text_position=_TEXT_POS[tpos], attention_mode=_MODES[mode], seed=seed,
                      sigma_max=sigma_max)
    model = build_model(cfg)
    flat = np.frombuffer(data, dtype="<f4", offset=_TVDT_HEAD.size)
    if flat.size != count or count != sum(p.numel() for p in model.parameters()):
        raise ShapeError(f"checkpoint holds {flat.size} parameters, header says {count}")
    off = 0
    with torch.no_grad():
        for p in model.parameters():
            k = p.numel()
            p.copy_(torch.from_numpy(flat[off: off + k].astype(np.float32).reshape(p.shape)))
            off += k
    return model


# --- traces ------------------------------------------------------------------

def _bitmap(keys: set, num_layers: int, num_heads: int, steps: int) -> bytes:
    bits = np.zeros(num_layers * num_heads * steps, dtype=np.uint8)
    for (l, h, s) in keys:
        bits[(s * num_layers + l) * num_heads + h] = 1
    return np.packbits(bits, bitorder="little").tobytes()


def write_trace(trace, path: str | Path) -> Path:
    """Serialize an :class:`~vdit_lab.transfer.AttentionTrace`."""
    lay: TokenLayout = trace.layout
    L, H, S = trace.num_layers, trace.num_heads, trace.steps
    keys = trace.keys()
    manifest = trace.manifest.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIIBIIII", ATRC_MAGIC, FORMAT_VERSION, lay.num_frames, lay.height, lay.width,
                             lay.num_text, _TEXT_POS.index(lay.text_position), L, H, S, lay.n))
        fh.write(_bitmap(set(keys), L, H, S))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for key in keys:
            fh.write(np.ascontiguousarray(trace.records[key].matrix, dtype="<f4").tobytes())
        _write_latents(fh, trace.source_latents)
    return Path(path)


def _write_latents(fh: BinaryIO, latents) -> None:
    if latents is None:
        fh.write(b"\x00")
        return
    arr = np.ascontiguousarray(latents.detach().numpy() if isinstance(latents, torch.Tensor) else latents, dtype="<f4")
    fh.write(struct.pack("<BI", 1, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_trace(path: str | Path):
    from .attention import AttentionRecord
    from .transfer import AttentionTrace

    data = Path(path).read_bytes()
    head = struct.Struct("<4sIIIIIBIIII")
    if len(data) < head.size or data[:4] != ATRC_MAGIC:
        raise ConfigError(f"{path} is not an ATRC trace")
    _, version, F, Hh, Ww, T, tpos, L, H, S, n = head.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported trace version {version}")
    layout = TokenLayout(F, Hh, Ww, T, _TEXT_POS[tpos])
    if layout.n != n:
        raise ShapeError(f"trace header n={n} disagrees with layout n={layout.n}")
    off = head.size
    nbits = L * H * S
    nbytes = (nbits + 7) // 8
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off), bitorder="little")[:nbits]
    off += nbytes
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest = RunManifest.from_json(data[off: off + mlen].decode())
    off += mlen
    records = {}
    for s in range(S):
        for l in range(L):
            for h in range(H):
                if bits[(s * L + l) * H + h]:
                    m = np.frombuffer(data, dtype="<f4", count=n * n, offset=off).reshape(n, n).astype(np.float32)
                    records[(l, h, s)] = AttentionRecord(l, h, s, m, validate=False)
                    off += 4 * n * n
    latents = None
    if data[off]:
        (ndim,) = struct.unpack_from("<I", data, off + 1)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 5)
        off += 5 + 4 * ndim
        count = int(np.prod(shape))
        latents = torch.from_numpy(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32))
    return AttentionTrace(manifest=manifest, layout=layout, num_layers=L, num_heads=H, steps=S,
                          records=records, source_latents=latents)


def save_latents(path: str | Path, latents) -> Path:
    arr = latents.detach().numpy() if isinstance(latents, torch.Tensor) else np.asarray(latents)
    path = Path(path)
    with open(path, "wb") as fh:
        np.save(fh, arr.astype(np.float32), allow_pickle=False)
    return path


def load_latents(path: str | Path) -> torch.Tensor:
    return torch.from_numpy(np.load(path, allow_pickle=False))


def make_manifest(model: ToyVDiT, prompt_seed: int, noise_seed: int, schedule, interventions=None,
                  **extra: Any) -> RunManifest:
    from .model import describe_interventions

    return RunManifest(
        config_hash=model.config.config_hash(),
        param_seed=model.config.seed,
        noise_seed=int(noise_seed),
        prompt_seed=int(prompt_seed),
        schedule=schedule.describe(),
        interventions=describe_interventions(interventions),
        model_config=model.config.to_dict(),
        extra=extra,
    )


def run_from_manifest(manifest: RunManifest, interventions=None, capture=None):
    """Rebuild the model, noise, prompt and schedule a manifest names and rerun.

    Interventions are summarized, not stored, in a manifest; pass the same
    ones again (the summary is checked against them).
    """
    from .model import DenoiseSchedule, denoise, describe_interventions, make_noise, prompt_embedding

    if manifest.model_config is None:
        raise ConfigError("manifest carries no model config")
    cfg = ModelConfig.from_dict(manifest.model_config)
    if cfg.config_hash() != manifest.config_hash:
        raise ConfigError("manifest model config does not match its hash")
    if describe_interventions(interventions) != manifest.interventions:
        raise ConfigError("interventions differ from the manifest's summary")
    model = build_model(cfg)
    schedule = DenoiseSchedule.from_description(manifest.schedule)
    return denoise(model, make_noise(cfg, manifest.noise_seed), prompt_embedding(cfg, manifest.prompt_seed),
                   schedule, interventions, capture)
