"""Which attention maps to keep during a run, and where to keep them."""
from __future__ import annotations

import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .errors import ConfigError, ResourceError


@dataclass(frozen=True)
class CaptureFilter:
    """Layer/head/step predicate; ``None`` means every index."""

    layers: frozenset[int] | None = None
    heads: frozenset[int] | None = None
    steps: frozenset[int] | None = None
    values: bool = False
    validate: bool = True

    def __post_init__(self):
        for name in ("layers", "heads", "steps"):
            v = getattr(self, name)
            if v is not None:
                v = frozenset(int(x) for x in v)
                if not v:
                    raise ConfigError(f"capture filter has an empty {name} set")
                object.__setattr__(self, name, v)

    def wants_layer(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers

    def wants_head(self, head: int) -> bool:
        return self.heads is None or head in self.heads

    def wants_step(self, step: int) -> bool:
        return self.steps is None or step in self.steps

    def __contains__(self, key: tuple[int, int, int]) -> bool:
        layer, head, step = key
        return self.wants_layer(layer) and self.wants_head(head) and self.wants_step(step)

    def keys(self, num_layers: int, num_heads: int, steps: int) -> list[tuple[int, int, int]]:
        """Selected (layer, head, step) triples in (step, layer, head) order."""
        return [(l, h, s) for s in range(steps) for l in range(num_layers) for h in range(num_heads) if (l, h, s) in self]

    @classmethod
    def parse(cls, text: str | None) -> "CaptureFilter":
        """Parse ``"layer=0,1;head=2;step=0-3"`` (``all`` or empty selects everything)."""
        if not text or text.strip() == "all":
            return cls()
        fields: dict[str, frozenset[int]] = {}
        for part in re.split(r"[;\s]+", text.strip()):
            if not part:
                continue
            if "=" not in part:
                raise ConfigError(f"capture term {part!r} is not key=value")
            key, val = part.split("=", 1)
            key = {"layer": "layers", "layers": "layers", "head": "heads", "heads": "heads",
                   "step": "steps", "steps": "steps"}.get(key.strip())
            if key is None:
                raise ConfigError(f"unknown capture key in {part!r}")
            fields[key] = frozenset(parse_index_list(val))
        return cls(**fields)

    def describe(self) -> dict:
        return {k: (None if getattr(self, k) is None else sorted(getattr(self, k))) for k in ("layers", "heads", "steps")}


def parse_index_list(text: str) -> list[int]:
    out: list[int] = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if "-" in tok:
            a, b = tok.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(tok))
    return out


class CaptureStore:
    """Collects records up to ``budget_bytes`` of map storage.

    Past the budget, records go to ``spill_dir`` as raw float32 blocks and
    are read back lazily; without a spill directory the overflow raises
    :class:`ResourceError`.
    """

    def __init__(self, budget_bytes: int | None = None, spill_dir: str | Path | None = None):
        self.budget_bytes = budget_bytes
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self._mem: list[AttentionRecord | tuple] = []
        self.nbytes = 0
        self._spill_file = None
        self._spill_path: Path | None = None
        self._spill_offset = 0

    def add(self, record: AttentionRecord) -> None:
        size = record.matrix.nbytes
        if self.budget_bytes is None or self.nbytes + size <= self.budget_bytes:
            self._mem.append(record)
            self.nbytes += size
            return
        if self.spill_dir is None:
            raise ResourceError(
                f"capture of {size} bytes for (layer {record.layer}, head {record.head}, step {record.step}) "
                f"exceeds budget {self.budget_bytes} ({self.nbytes} in use)"
            )
        if self._spill_file is None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
            fd, name = tempfile.mkstemp(prefix="capture-", suffix=".f32", dir=self.spill_dir)
            self._spill_file = open(fd, "wb")
            self._spill_path = Path(name)
        block = np.ascontiguousarray(record.matrix, dtype="<f4")
        self._spill_file.write(block.tobytes())
        self._spill_file.flush()
        self._mem.append(("spill", record.layer, record.head, record.step, record.n, self._spill_offset))
        self._spill_offset += block.nbytes

    def __len__(self) -> int:
        return len(self._mem)

    @property
    def records(self) -> list[AttentionRecord]:
        out = []
        for r in self._mem:
            if isinstance(r, AttentionRecord):
                out.append(r)
            else:
                _, layer, head, step, n, off = r
                m = np.memmap(self._spill_path, dtype="<f4", mode="r", offset=off, shape=(n, n))
                out.append(AttentionRecord(layer, head, step, np.array(m, dtype=np.float32), validate=False))
        return out

    def close(self) -> None:
        if self._spill_file is not None:
            self._spill_file.close()
