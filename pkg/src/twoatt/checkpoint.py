"""Model checkpoints: parameters, optimizer state, schedule, RNG and config."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .diffcore import load_tensors, save_tensors
from .model import Model

FORMAT_VERSION = 1
OPT_PREFIX = "opt.v."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    schedule: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return self.model.config


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: OrderedDict[str, np.ndarray] = OrderedDict(ckpt.model.state_arrays())
    for name in ckpt.model.named_parameters():
        if name in ckpt.optimizer:
            tensors[OPT_PREFIX + name] = ckpt.optimizer[name]
    cfg = ckpt.model.config.to_dict()
    cfg["widths"] = list(cfg["widths"])
    meta = {
        "format": FORMAT_VERSION,
        "epoch": ckpt.epoch,
        "config": cfg,
        "dtype": ckpt.model.dtype.str,
        "rng_state": ckpt.rng_state,
        "schedule": ckpt.schedule,
        "extra": ckpt.extra,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    try:
        tensors, meta = load_tensors(path)
    except FileNotFoundError:
        raise
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    config = TrainConfig.from_dict(meta["config"])
    model = Model(config, dtype=np.dtype(meta["dtype"]))
    params = {k: v for k, v in tensors.items() if not k.startswith(OPT_PREFIX)}
    try:
        model.load_arrays(params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    optimizer = {k[len(OPT_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPT_PREFIX)}
    return Checkpoint(model, optimizer, meta["epoch"], meta.get("rng_state"), meta.get("schedule"),
                      meta.get("extra") or {})
