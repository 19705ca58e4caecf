"""The full network: small conv backbone, attention blocks, level fusion, heads.

Backbone stage k is a conv (5x5 first, then 3x3) + relu, then (if k < blocks) a residual attention
block at that resolution, then a 2x2 max-pool. With a 48x48 input the blocks
see 48, 24 and 12 pixel maps. The fusion taps are the block outputs plus the
final pooled stage.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .attention import AttentionBlockParams, attention_block_forward, make_block
from .config import TrainConfig
from .diffcore import ShapeError, Tensor
from .fusion import FusionParams, fusion_forward, level_embed, make_fusion
from .heads import HeadParams, make_heads, stage1_forward, stage2_forward
from .params import ConvParams, he_conv

# wider first kernel, AlexNet style
STAGE_KERNELS = (5, 3, 3)


class Outputs(NamedTuple):
    dim_rep: Tensor
    cat_rep: Tensor | None
    clf_logits: Tensor | None
    valence: Tensor | None
    arousal: Tensor | None


class Model:
    def __init__(self, config: TrainConfig, seed: int | None = None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        size = config.input_size
        chans = (1,) + tuple(config.widths)
        self.stages = [he_conv(rng, chans[k + 1], chans[k], STAGE_KERNELS[k], dtype) for k in range(3)]
        self.blocks: list[AttentionBlockParams] = []
        for k in range(config.n_blocks):
            self.blocks.append(make_block(rng, chans[k + 1], chans[k + 1], (size >> k, size >> k), dtype))
        fused_width = 2 * config.rnn_u
        self.fusion: FusionParams | None = None
        self.neck: ConvParams | None = None
        if config.attention_mode == "level2":
            taps = [chans[k + 1] for k in range(config.n_blocks)] + [chans[3]]
            self.fusion = make_fusion(rng, taps, config.embed_d, config.rnn_u, dtype)
        else:
            self.neck = he_conv(rng, fused_width, chans[3], 1, dtype)
        self.heads: HeadParams = make_heads(rng, fused_width, config.head_mode, config.n_dim,
                                            config.n_cat, dtype)

    # ------------------------------------------------------------ parameters
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for k, conv in enumerate(self.stages):
            out.update(conv.named(f"backbone.{k}"))
        for k, block in enumerate(self.blocks):
            out.update(block.named(f"block{k + 1}"))
        if self.fusion is not None:
            out.update(self.fusion.named("fusion"))
        if self.neck is not None:
            out.update(self.neck.named("neck"))
        out.update(self.heads.named("heads"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.named_parameters().items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise ShapeError(f"incompatible architecture: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, t in params.items():
            arr = arrays[name]
            if arr.shape != t.shape:
                raise ShapeError(f"incompatible architecture: {name} has shape {arr.shape}, model wants {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # --------------------------------------------------------------- forward
    def features(self, x: Tensor) -> Tensor:
        size = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ShapeError(f"model expects [N,1,{size},{size}] input, got {x.shape}")
        h = dc.add(x, -0.5)
        taps = []
        for k, conv in enumerate(self.stages):
            h = dc.relu(conv(h, padding=conv.w.shape[2] // 2))
            if k < len(self.blocks):
                h = attention_block_forward(h, self.blocks[k])
                taps.append(h)
            h = dc.maxpool2d(h, 2, 2)
        taps.append(h)
        if self.fusion is not None:
            return fusion_forward(taps, self.fusion)
        return level_embed(h, self.neck)

    def forward(self, x) -> Outputs:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        fused = self.features(x)
        s1 = stage1_forward(fused, self.heads)
        s2 = stage2_forward(s1.dim_rep, s1.cat_rep, self.heads)
        return Outputs(s1.dim_rep, s1.cat_rep, s1.clf_logits, s2.valence, s2.arousal)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 128) -> dict[str, np.ndarray]:
        """Gradient-free outputs for [N,1,S,S] images: valence, arousal, logits."""
        chunks: dict[str, list[np.ndarray]] = {}
        with dc.no_grad():
            for start in range(0, len(images), batch_size):
                out = self.forward(images[start:start + batch_size])
                for key, t in (("valence", out.valence), ("arousal", out.arousal), ("logits", out.clf_logits)):
                    if t is not None:
                        chunks.setdefault(key, []).append(t.data.reshape(len(t.data), -1))
        result = {k: np.concatenate(v) for k, v in chunks.items()}
        for key in ("valence", "arousal"):
            if key in result:
                result[key] = result[key][:, 0]
        return result
