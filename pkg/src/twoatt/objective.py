"""Regression losses and agreement metrics for valence/arousal."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .diffcore import Tensor, make_op

TUKEY_C = 4.685


@dataclass(frozen=True)
class PredictionPair:
    """Ground truth and predictions of equal length."""

    truth: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=np.float64).reshape(-1)
        pred = np.asarray(self.pred, dtype=np.float64).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError(f"length mismatch: {truth.size} truths vs {pred.size} predictions")
        if truth.size < 1:
            raise ValueError("need at least one value")
        if not (np.all(np.isfinite(truth)) and np.all(np.isfinite(pred))):
            raise ValueError("truth and predictions must be finite")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "pred", pred)

    @property
    def residual(self) -> np.ndarray:
        return self.truth - self.pred


@dataclass(frozen=True)
class TukeyConfig:
    c: float = TUKEY_C

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"Tukey cutoff must be positive, got {self.c}")


def _pair(truth, pred) -> PredictionPair:
    return truth if isinstance(truth, PredictionPair) else PredictionPair(truth, pred)


def tukey_rho(r, c: float = TUKEY_C) -> np.ndarray:
    """Biweight penalty per residual, saturating at c**2 / 6."""
    r = np.asarray(r, dtype=np.float64)
    inside = np.abs(r) <= c
    u = 1.0 - (r / c) ** 2
    return np.where(inside, (c * c / 6.0) * (1.0 - u ** 3), c * c / 6.0)


def tukey_grad(r, c: float = TUKEY_C):
    """d rho / d r: r * (1 - (r/c)^2)^2 inside the cutoff, zero outside."""
    r_arr = np.asarray(r, dtype=np.float64)
    g = np.where(np.abs(r_arr) <= c, r_arr * (1.0 - (r_arr / c) ** 2) ** 2, 0.0)
    return float(g) if np.ndim(r) == 0 else g


def mse(truth, pred=None) -> float:
    pair = _pair(truth, pred)
    return float(np.mean(pair.residual ** 2))


def tukey_loss(truth, pred=None, cfg: TukeyConfig | float = TukeyConfig()) -> float:
    c = cfg.c if isinstance(cfg, TukeyConfig) else TukeyConfig(cfg).c
    pair = _pair(truth, pred)
    return float(np.mean(tukey_rho(pair.residual, c)))


def rmse(truth, pred=None) -> float:
    return float(np.sqrt(mse(truth, pred)))


class Concordance(NamedTuple):
    value: float
    degenerate: bool


def concordance(truth, pred=None) -> Concordance:
    """CCC with population moments; 0 with ``degenerate=True`` when a side is constant."""
    pair = _pair(truth, pred)
    y, p = pair.truth, pair.pred
    if y.size < 2:
        raise ValueError("CCC needs at least two values")
    my, mp = y.mean(), p.mean()
    vy = np.mean((y - my) ** 2)
    vp = np.mean((p - mp) ** 2)
    if vy == 0.0 or vp == 0.0:
        return Concordance(0.0, True)
    cov = np.mean((y - my) * (p - mp))
    value = 2.0 * cov / (vy + vp + (my - mp) ** 2)
    return Concordance(float(np.clip(value, -1.0, 1.0)), False)


def ccc(truth, pred=None) -> float:
    return concordance(truth, pred).value


# ----------------------------------------------------------- training losses

LOSSES = ("mse", "tukey")


def regression_loss(pred: Tensor, truth, kind: str = "tukey", c: float = TUKEY_C) -> Tensor:
    """Batch-mean loss between a [N] or [N,1] prediction tensor and targets."""
    truth = np.asarray(truth, dtype=pred.dtype).reshape(pred.shape)
    r = truth - pred.data
    n = r.size
    if kind == "mse":
        out = np.asarray(np.mean(r * r), dtype=pred.dtype)
        return make_op("mse_loss", out, (pred,), lambda g: (g * (-2.0 / n) * r,))
    if kind == "tukey":
        TukeyConfig(c)
        out = np.asarray(np.mean(tukey_rho(r, c)), dtype=pred.dtype)
        dr = tukey_grad(r, c).astype(pred.dtype)
        # residual is truth - pred, hence the sign flip
        return make_op("tukey_loss", out, (pred,), lambda g: (g * (-1.0 / n) * dr,))
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")
