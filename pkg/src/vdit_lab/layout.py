"""Flattened video-token layout and the structure metrics built on it."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .errors import BoundsError, ConfigError, NotApplicableError, ShapeError

HEATMAP_ALPHA = 1000.0


@dataclass(frozen=True)
class TokenLayout:
    num_frames: int
    height: int
    width: int
    num_text: int = 0
    text_position: str = "suffix"

    def __post_init__(self):
        if min(self.num_frames, self.height, self.width) < 1 or self.num_text < 0:
            raise ConfigError(f"invalid layout {self}")
        if self.text_position not in ("prefix", "suffix"):
            raise ConfigError(f"text_position must be 'prefix' or 'suffix', got {self.text_position!r}")

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def num_vision(self) -> int:
        return self.num_frames * self.tokens_per_frame

    @property
    def n(self) -> int:
        return self.num_vision + self.num_text

    @property
    def vision_offset(self) -> int:
        return self.num_text if self.text_position == "prefix" else 0

    @property
    def text_offset(self) -> int:
        return 0 if self.text_position == "prefix" else self.num_vision

    def vision_slice(self) -> slice:
        return slice(self.vision_offset, self.vision_offset + self.num_vision)

    def text_slice(self) -> slice:
        return slice(self.text_offset, self.text_offset + self.num_text)

    def without_text(self) -> "TokenLayout":
        return TokenLayout(self.num_frames, self.height, self.width, 0, self.text_position)

    def to_dict(self) -> dict:
        return asdict(self)

    def flatten(self, frame: int, row: int, col: int) -> int:
        if not (0 <= frame < self.num_frames and 0 <= row < self.height and 0 <= col < self.width):
            raise BoundsError(f"({frame}, {row}, {col}) outside {self.num_frames}x{self.height}x{self.width}")
        return self.vision_offset + frame * self.tokens_per_frame + row * self.width + col

    def text_index(self, t: int) -> int:
        if not 0 <= t < self.num_text:
            raise BoundsError(f"text token {t} outside 0..{self.num_text - 1}")
        return self.text_offset + t

    def unflatten(self, index: int) -> tuple[str, tuple[int, ...]]:
        """``("vision", (frame, row, col))`` or ``("text", (t,))``."""
        if not 0 <= index < self.n:
            raise BoundsError(f"index {index} outside 0..{self.n - 1}")
        local = index - self.vision_offset
        if 0 <= local < self.num_vision:
            frame, rem = divmod(local, self.tokens_per_frame)
            return "vision", (frame, *divmod(rem, self.width))
        return "text", (index - self.text_offset,)

    def frame_of(self) -> np.ndarray:
        """Frame index per sequence position, -1 for text tokens."""
        out = np.full(self.n, -1, dtype=np.int64)
        out[self.vision_slice()] = np.repeat(np.arange(self.num_frames), self.tokens_per_frame)
        return out


def flatten_index(layout: TokenLayout, frame: int, row: int, col: int) -> int:
    return layout.flatten(frame, row, col)


def _matrix(attn, layout: TokenLayout) -> np.ndarray:
    m = attn.matrix if isinstance(attn, AttentionRecord) else np.asarray(attn)
    if m.shape != (layout.n, layout.n):
        raise ShapeError(f"map {m.shape} does not match layout n={layout.n}")
    return m.astype(np.float64)


@dataclass
class StructureReport:
    band_mass: dict[int, float]
    text_mass: float
    text_share: list[float] | None = None
    first_token_dominance: float | None = None


def frame_offset_mass(attn, layout: TokenLayout) -> tuple[dict[int, float], float]:
    """Mean attention mass per frame offset, averaged over vision queries.

    Returns ``(band_mass, text_mass)``; ``band_mass[d]`` pools offsets ``+d``
    and ``-d``.
    """
    m = _matrix(attn, layout)
    F, S = layout.num_frames, layout.tokens_per_frame
    vis = m[layout.vision_slice()]
    # [F_q, S, F_k, S] block view over vision keys
    blocks = vis[:, layout.vision_slice()].reshape(F, S, F, S).sum(axis=3)
    per_frame = blocks.mean(axis=1)  # [F_q, F_k], mean over queries within a frame
    offsets = np.abs(np.arange(F)[:, None] - np.arange(F)[None, :])
    band = {d: float(per_frame[offsets == d].sum() / F) for d in range(F)}
    text_mass = float(vis[:, layout.text_slice()].sum(axis=1).mean()) if layout.num_text else 0.0
    return band, text_mass


def text_attention_share(attn, layout: TokenLayout) -> tuple[list[float], float]:
    """Mean attention each text token receives from vision queries, plus the
    share held by text token 0 (0.0 when no mass reaches text at all)."""
    if layout.num_text == 0:
        raise NotApplicableError("layout has no text tokens")
    m = _matrix(attn, layout)
    share = m[layout.vision_slice(), layout.text_slice()].mean(axis=0)
    total = share.sum()
    dominance = float(share[0] / total) if total > 0 else 0.0
    return [float(s) for s in share], min(max(dominance, 0.0), 1.0)


def structure_report(attn, layout: TokenLayout) -> StructureReport:
    band, text_mass = frame_offset_mass(attn, layout)
    rep = StructureReport(band, text_mass)
    if layout.num_text:
        rep.text_share, rep.first_token_dominance = text_attention_share(attn, layout)
    return rep


def block_average(m: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ConfigError(f"downsample must be >= 1, got {factor}")
    h, w = m.shape[0] // factor, m.shape[1] // factor
    if h == 0 or w == 0:
        raise ShapeError(f"downsample {factor} exceeds map size {m.shape}")
    m = m[: h * factor, : w * factor]
    return m.reshape(h, factor, w, factor).mean(axis=(1, 3))


def render_heatmap(attn, downsample: int = 1, alpha: float = HEATMAP_ALPHA) -> np.ndarray:
    """Block-average then log-scale to a ``uint8`` grayscale image.

    Intensity is ``log1p(alpha * x) / log1p(alpha * max)``; an all-zero input
    renders black.
    """
    m = attn.matrix if isinstance(attn, AttentionRecord) else np.asarray(attn)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got {m.shape}")
    img = block_average(m.astype(np.float64), downsample)
    scaled = np.log1p(alpha * np.clip(img, 0.0, None))
    top = scaled.max()
    if top <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * scaled / top).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> Path:
    """Binary P6; grayscale input is replicated across RGB."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected HxW or HxWx3 image, got {img.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P6":
        raise ShapeError(f"{path} is not a P6 image")
    w, h = (int(x) for x in dims.split())
    if int(maxval) != 255:
        raise ShapeError("only 8-bit PPM supported")
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def histogram_image(values: np.ndarray) -> np.ndarray:
    """Linear grayscale rendering of a nonnegative 2-D array (histograms, curves)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    top = v.max(initial=0.0)
    if top <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(255.0 * np.clip(v, 0, None) / top).astype(np.uint8)
