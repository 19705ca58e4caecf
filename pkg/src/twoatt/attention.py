"""Position-level attention: the residual attention block.

The block splits its input into a trunk branch ``T`` (a plain conv stack) and
a mask branch ``M`` (max-pool descent, bilinear ascent, sigmoid gate) and
merges them as ``(1 + M) * T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .params import ConvParams, he_conv

MASK_DEPTH = 2
TRUNK_DEPTH = 2


@dataclass
class AttentionBlockParams:
    trunk: list[ConvParams]
    mask_down: list[ConvParams]
    mask_up: list[ConvParams]
    mask_gate: ConvParams
    pool: int = 2
    # test seam: a constant (or array) replacing M(x) in the block output
    mask_override: np.ndarray | float | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.mask_down) != len(self.mask_up):
            raise ValueError("mask branch needs as many upsample stages as pooling stages")
        if self.mask_gate.w.shape[2:] != (1, 1):
            raise ValueError("mask gate must be a 1x1 convolution")
        if self.mask_gate.w.shape[0] != self.out_channels:
            raise ValueError("mask gate channels must equal trunk output channels")

    @property
    def in_channels(self) -> int:
        return self.trunk[0].w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.trunk[-1].w.shape[0]

    @property
    def depth(self) -> int:
        return len(self.mask_down)

    def check_spatial(self, h: int, w: int) -> None:
        factor = self.pool ** self.depth
        if h % factor or w % factor:
            raise ShapeError(
                f"attention block needs spatial size divisible by {factor}, got {h}x{w}")

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, conv in enumerate(self.trunk):
            yield from conv.named(f"{prefix}.trunk.{i}")
        for i, conv in enumerate(self.mask_down):
            yield from conv.named(f"{prefix}.mask.down.{i}")
        for i, conv in enumerate(self.mask_up):
            yield from conv.named(f"{prefix}.mask.up.{i}")
        yield from self.mask_gate.named(f"{prefix}.mask.gate")


def make_block(rng: np.random.Generator, in_ch: int, out_ch: int, spatial: tuple[int, int] | None = None,
               dtype=np.float32, trunk_depth: int = TRUNK_DEPTH, mask_depth: int = MASK_DEPTH,
               ) -> AttentionBlockParams:
    """He-initialized block; ``spatial`` (if given) is validated against the mask depth."""
    trunk = [he_conv(rng, out_ch, in_ch if i == 0 else out_ch, 3, dtype) for i in range(trunk_depth)]
    down = [he_conv(rng, out_ch, in_ch if i == 0 else out_ch, 3, dtype) for i in range(mask_depth)]
    up = [he_conv(rng, out_ch, out_ch, 3, dtype) for _ in range(mask_depth)]
    gate = he_conv(rng, out_ch, out_ch, 1, dtype)
    block = AttentionBlockParams(trunk, down, up, gate)
    if spatial is not None:
        block.check_spatial(*spatial)
    return block


def trunk_forward(x: Tensor, params: AttentionBlockParams) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"trunk expects [N,{params.in_channels},H,W], got {x.shape}")
    h = x
    for conv in params.trunk:
        k = conv.w.shape[2]
        h = dc.relu(conv(h, padding=k // 2))
    return h


def mask_forward(x: Tensor, params: AttentionBlockParams) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"mask expects [N,{params.in_channels},H,W], got {x.shape}")
    params.check_spatial(*x.shape[2:])
    sizes = []
    h = x
    for conv in params.mask_down:
        sizes.append(h.shape[2:])
        h = dc.maxpool2d(h, params.pool, params.pool)
        h = dc.relu(conv(h, padding=1))
    for conv, (th, tw) in zip(params.mask_up, reversed(sizes)):
        h = dc.upsample_bilinear(h, th, tw)
        h = dc.relu(conv(h, padding=1))
    return dc.sigmoid(params.mask_gate(h))


def attention_block_forward(x: Tensor, params: AttentionBlockParams) -> Tensor:
    """Block output ``(1 + M(x)) * T(x)``."""
    t = trunk_forward(x, params)
    if params.mask_override is not None:
        m = Tensor(np.broadcast_to(np.asarray(params.mask_override, dtype=t.dtype), t.shape))
    else:
        m = mask_forward(x, params)
    if m.shape != t.shape:
        raise ShapeError(f"mask output {m.shape} does not match trunk output {t.shape}")
    return dc.mul(dc.add(m, 1.0), t)
