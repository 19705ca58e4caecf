"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .heads import HEAD_MODES
from .objective import LOSSES, TUKEY_C

ATTENTION_MODES = ("none", "level1", "level2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # architecture
    blocks: int = 2
    attention_mode: str = "level2"
    head_mode: str = "2mt"
    widths: tuple[int, ...] = (8, 16, 32)
    embed_d: int = 64
    rnn_u: int = 64
    n_dim: int = 256
    n_cat: int = 128
    input_size: int = 48
    # objective
    loss: str = "tukey"
    alpha: float = 0.5
    beta: float = 0.3
    c: float = TUKEY_C
    # optimization
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    plateau_patience: int = 1
    min_delta: float = 1e-4
    max_lr_drops: int = 2
    # optimizer steps at the initial rate before plateau detection engages
    warmup_steps: int = 300

    def __post_init__(self):
        if self.blocks not in (1, 2, 3):
            raise ConfigError(f"blocks must be 1, 2 or 3, got {self.blocks}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError("widths needs three positive channel counts")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.c <= 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("c, lr and batch_size must be positive, epochs and warmup_steps non-negative")
        if self.input_size % 8:
            raise ConfigError("input_size must be divisible by 8 (three 2x2 pools)")
        min_map = self.input_size >> max(self.n_blocks - 1, 0)
        if self.n_blocks and min_map % 4:
            raise ConfigError(
                f"block {self.n_blocks} would see a {min_map}x{min_map} map; the mask branch "
                "needs sizes divisible by 4")

    @property
    def n_blocks(self) -> int:
        return 0 if self.attention_mode == "none" else self.blocks

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **coerce(changes))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**coerce(values))

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "TrainConfig":
        values = parse_kv(Path(path).read_text(encoding="utf-8"))
        values.update(overrides or {})
        return cls.from_dict(values)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def coerce(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kind = _FIELD_TYPES[key]
        if not isinstance(raw, str):
            out[key] = tuple(raw) if key == "widths" else raw
            continue
        raw = raw.strip()
        try:
            if key == "widths":
                out[key] = tuple(int(v) for v in raw.split(","))
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return out


def parse_kv(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
