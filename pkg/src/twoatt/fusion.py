"""Layer-level attention over backbone taps.

Each tapped feature map is projected to a fixed width by a 1x1 conv and
global-average pooled. The resulting sequence (shallow to deep) runs through
a bidirectional tanh RNN; outputs are pooled with softmax weights given by the
dot product of each hidden state with its own output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .params import ConvParams, DenseParams, he_conv, xavier_dense


@dataclass
class RnnCell:
    wx: Tensor  # [d, u]
    wh: Tensor  # [u, u]
    b: Tensor  # [u]

    def step(self, x: Tensor, h: Tensor | None) -> Tensor:
        z = dc.dense(x, self.wx, self.b)
        if h is not None:
            z = dc.add(z, dc.dense(h, self.wh, Tensor(np.zeros(self.wh.shape[1], dtype=h.dtype))))
        return dc.tanh(z)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.wx", self.wx
        yield f"{prefix}.wh", self.wh
        yield f"{prefix}.b", self.b


@dataclass
class BiRnnParams:
    fwd: RnnCell
    bwd: RnnCell
    out: DenseParams  # [2u, 2u]

    def swapped(self) -> "BiRnnParams":
        return BiRnnParams(self.bwd, self.fwd, self.out)


@dataclass
class LevelSequence:
    """Per-level embeddings x_1..x_l, each [N, d], shallowest first."""

    embeddings: list[Tensor]

    def __post_init__(self):
        widths = {e.shape[-1] for e in self.embeddings}
        if len(widths) > 1:
            raise ShapeError(f"level embeddings disagree on width: {sorted(widths)}")

    def __len__(self) -> int:
        return len(self.embeddings)

    def reversed(self) -> "LevelSequence":
        return LevelSequence(self.embeddings[::-1])


@dataclass
class BiRnnState:
    hidden: list[Tensor]  # h_i = [h_fwd,i ; h_bwd,i], each [N, 2u]
    outputs: list[Tensor]  # y_i, each [N, 2u]
    forward: list[Tensor]
    backward: list[Tensor]


@dataclass
class FusionParams:
    embed: list[ConvParams]
    rnn: BiRnnParams

    def named(self, prefix: str = "fusion") -> Iterator[tuple[str, Tensor]]:
        for k, conv in enumerate(self.embed):
            yield from conv.named(f"{prefix}.embed.{k}")
        yield from self.rnn.fwd.named(f"{prefix}.rnn.fwd")
        yield from self.rnn.bwd.named(f"{prefix}.rnn.bwd")
        yield from self.rnn.out.named(f"{prefix}.attn")


def make_fusion(rng: np.random.Generator, tap_channels: Sequence[int], d: int, u: int,
                dtype=np.float32) -> FusionParams:
    embed = [he_conv(rng, d, c, 1, dtype) for c in tap_channels]

    def cell() -> RnnCell:
        p = xavier_dense(rng, d, u, dtype)
        wh = xavier_dense(rng, u, u, dtype).w
        return RnnCell(p.w, wh, p.b)

    return FusionParams(embed, BiRnnParams(cell(), cell(), xavier_dense(rng, 2 * u, 2 * u, dtype)))


def level_embed(feature_map: Tensor, proj: ConvParams) -> Tensor:
    """GAP(conv1x1(feature_map)) -> [N, d]."""
    if proj.w.shape[2:] != (1, 1):
        raise ShapeError("level projection must be a 1x1 convolution")
    if feature_map.data.ndim != 4 or feature_map.shape[1] != proj.w.shape[1]:
        raise ShapeError(
            f"level projection expects {proj.w.shape[1]} channels, got map of shape {feature_map.shape}")
    return dc.global_avg_pool(proj(feature_map))


def birnn_forward(seq: LevelSequence, params: BiRnnParams) -> BiRnnState:
    if len(seq) < 1:
        raise ShapeError("bidirectional RNN needs at least one level")
    xs = seq.embeddings
    fwd: list[Tensor] = []
    h = None
    for x in xs:
        h = params.fwd.step(x, h)
        fwd.append(h)
    bwd: list[Tensor] = [None] * len(xs)  # type: ignore[list-item]
    h = None
    for i in range(len(xs) - 1, -1, -1):
        h = params.bwd.step(xs[i], h)
        bwd[i] = h
    hidden = [dc.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    outputs = [dc.tanh(params.out(hi)) for hi in hidden]
    return BiRnnState(hidden, outputs, fwd, bwd)


def attention_weights(state: BiRnnState) -> Tensor:
    """Softmax over levels of <h_i, y_i>, shape [N, l]."""
    if not state.hidden or len(state.hidden) != len(state.outputs):
        raise ShapeError("hidden states and outputs must be non-empty and of equal length")
    for h, y in zip(state.hidden, state.outputs):
        if h.shape != y.shape:
            raise ShapeError(f"score needs equal widths, got hidden {h.shape} vs output {y.shape}")
    hs = dc.stack(state.hidden, axis=1)  # N, l, 2u
    ys = dc.stack(state.outputs, axis=1)
    scores = dc.tsum(dc.mul(hs, ys), axis=2)  # N, l
    return dc.softmax(scores, axis=1)


def self_attention_pool(state: BiRnnState) -> Tensor:
    """Y_att = sum_i softmax_i(<h_i, y_i>) * y_i, shape [N, 2u]."""
    w = attention_weights(state)
    ys = dc.stack(state.outputs, axis=1)
    n, l = w.shape
    return dc.tsum(dc.mul(dc.reshape(w, (n, l, 1)), ys), axis=1)


def fusion_forward(taps: Sequence[Tensor], params: FusionParams) -> Tensor:
    if len(taps) != len(params.embed):
        raise ShapeError(f"{len(taps)} taps for {len(params.embed)} level projections")
    seq = LevelSequence([level_embed(t, p) for t, p in zip(taps, params.embed)])
    return self_attention_pool(birnn_forward(seq, params.rnn))
