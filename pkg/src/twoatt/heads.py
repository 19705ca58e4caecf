"""Two-stage multi-task heads.

Stage 1 maps the fused feature to a dimensional representation and (in the
full ``2mt`` mode) a categorical one with a 7-way classifier on top. Stage 2
regresses valence and arousal from the concatenation of both representations.

Head modes:

``2mt``       classifier branch + both regressors on [dim ; cat]
``mt``        both regressors on the dimensional representation only
``single_v``  valence regressor only
``single_a``  arousal regressor only
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .objective import TUKEY_C, regression_loss
from .params import DenseParams, xavier_dense

N_CLASSES = 7
HEAD_MODES = ("single_v", "single_a", "mt", "2mt")
HIDDEN_GRID = ((128, 128), (256, 128), (256, 256))


@dataclass
class HeadParams:
    dim_fc: DenseParams
    cat_fc: DenseParams | None = None
    clf_out: DenseParams | None = None
    valence_out: DenseParams | None = None
    arousal_out: DenseParams | None = None

    def __post_init__(self):
        if (self.cat_fc is None) != (self.clf_out is None):
            raise ValueError("categorical layer and classifier come as a pair")
        if self.clf_out is not None and self.clf_out.w.shape[1] != N_CLASSES:
            raise ValueError(f"classifier must emit {N_CLASSES} logits")
        if self.valence_out is None and self.arousal_out is None:
            raise ValueError("at least one regression head is required")
        reg_in = self.n_dim + (self.n_cat if self.cat_fc is not None else 0)
        for head in (self.valence_out, self.arousal_out):
            if head is not None and head.d_in != reg_in:
                raise ValueError(f"regression head expects width {head.d_in}, stage 1 gives {reg_in}")

    @property
    def fused_width(self) -> int:
        return self.dim_fc.d_in

    @property
    def n_dim(self) -> int:
        return self.dim_fc.w.shape[1]

    @property
    def n_cat(self) -> int:
        return 0 if self.cat_fc is None else self.cat_fc.w.shape[1]

    @property
    def mode(self) -> str:
        if self.cat_fc is not None:
            return "2mt"
        if self.valence_out is not None and self.arousal_out is not None:
            return "mt"
        return "single_v" if self.valence_out is not None else "single_a"

    def named(self, prefix: str = "heads") -> Iterator[tuple[str, Tensor]]:
        for name in ("dim_fc", "cat_fc", "clf_out", "valence_out", "arousal_out"):
            p = getattr(self, name)
            if p is not None:
                yield from p.named(f"{prefix}.{name}")


def make_heads(rng: np.random.Generator, fused: int, mode: str = "2mt", n_dim: int = 256,
               n_cat: int = 128, dtype=np.float32) -> HeadParams:
    if mode not in HEAD_MODES:
        raise ValueError(f"unknown head mode {mode!r}; expected one of {HEAD_MODES}")
    if n_dim < 1 or n_cat < 1:
        raise ValueError("hidden widths must be positive")
    dim_fc = xavier_dense(rng, fused, n_dim, dtype)
    cat_fc = clf = None
    reg_in = n_dim
    if mode == "2mt":
        cat_fc = xavier_dense(rng, fused, n_cat, dtype)
        clf = xavier_dense(rng, n_cat, N_CLASSES, dtype)
        reg_in += n_cat
    v = xavier_dense(rng, reg_in, 1, dtype) if mode in ("2mt", "mt", "single_v") else None
    a = xavier_dense(rng, reg_in, 1, dtype) if mode in ("2mt", "mt", "single_a") else None
    return HeadParams(dim_fc, cat_fc, clf, v, a)


class Stage1(NamedTuple):
    dim_rep: Tensor
    cat_rep: Tensor | None
    clf_logits: Tensor | None


class Stage2(NamedTuple):
    valence: Tensor | None
    arousal: Tensor | None


def stage1_forward(fused: Tensor, params: HeadParams) -> Stage1:
    if fused.data.ndim != 2 or fused.shape[1] != params.fused_width:
        raise ShapeError(f"heads expect fused width {params.fused_width}, got {fused.shape}")
    dim_rep = dc.relu(params.dim_fc(fused))
    if params.cat_fc is None:
        return Stage1(dim_rep, None, None)
    cat_rep = dc.relu(params.cat_fc(fused))
    return Stage1(dim_rep, cat_rep, params.clf_out(cat_rep))


def stage2_forward(dim_rep: Tensor, cat_rep: Tensor | None, params: HeadParams) -> Stage2:
    if dim_rep.shape[-1] != params.n_dim:
        raise ShapeError(f"dimensional representation width {dim_rep.shape[-1]} != {params.n_dim}")
    if params.cat_fc is not None:
        if cat_rep is None or cat_rep.shape[-1] != params.n_cat:
            got = None if cat_rep is None else cat_rep.shape[-1]
            raise ShapeError(f"categorical representation width {got} != {params.n_cat}")
        joint = dc.concat([dim_rep, cat_rep], axis=1)
    else:
        joint = dim_rep
    v = dc.tanh(params.valence_out(joint)) if params.valence_out is not None else None
    a = dc.tanh(params.arousal_out(joint)) if params.arousal_out is not None else None
    return Stage2(v, a)


def combine_losses(l_clf, l_arousal, l_valence, alpha: float = 0.5, beta: float = 0.3):
    """alpha * L_clf + (1 - alpha) * (beta * L_arousal + (1 - beta) * L_valence).

    Works on floats or scalar tensors; absent terms (None) drop out together
    with their weight, so regression-only modes use the regression part alone.
    """
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValueError("alpha and beta must lie in [0, 1]")
    if l_arousal is not None and l_valence is not None:
        reg = beta * l_arousal + (1.0 - beta) * l_valence
    else:
        reg = l_arousal if l_arousal is not None else l_valence
    if l_clf is None:
        if reg is None:
            raise ValueError("no loss terms")
        return reg
    if reg is None:
        return l_clf
    return alpha * l_clf + (1.0 - alpha) * reg


@dataclass
class Labels:
    valence: np.ndarray
    arousal: np.ndarray
    expression: np.ndarray  # int, -1 for unlabeled

    def __len__(self) -> int:
        return len(self.valence)


def total_loss(clf_logits: Tensor | None, valence_pred: Tensor | None, arousal_pred: Tensor | None,
               labels: Labels, alpha: float = 0.5, beta: float = 0.3, loss: str = "tukey",
               c: float = TUKEY_C) -> Tensor:
    n = len(labels)
    for t in (clf_logits, valence_pred, arousal_pred):
        if t is not None and t.shape[0] != n:
            raise ShapeError(f"prediction batch {t.shape[0]} != label batch {n}")
    l_clf = l_v = l_a = None
    if clf_logits is not None:
        if labels.expression is None or np.any(np.asarray(labels.expression) < 0):
            raise ValueError("classifier branch enabled but expression labels are missing")
        l_clf = dc.cross_entropy(clf_logits, labels.expression)
    if valence_pred is not None:
        if labels.valence is None:
            raise ValueError("valence head enabled but valence labels are missing")
        l_v = regression_loss(valence_pred, labels.valence, loss, c)
    if arousal_pred is not None:
        if labels.arousal is None:
            raise ValueError("arousal head enabled but arousal labels are missing")
        l_a = regression_loss(arousal_pred, labels.arousal, loss, c)
    return combine_losses(l_clf, l_a, l_v, alpha, beta)
