"""Finite-difference gradient suite over every differentiable op and the full loss.

Each case builds small float64 inputs from a fixed seed, contracts the op's
output with fixed random weights so every output entry matters, and compares
backprop with central differences. Entries whose nudge crosses a relu or
max-pool switch are skipped and counted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .attention import attention_block_forward, make_block
from .config import TrainConfig
from .diffcore import GradCheckReport, Tensor
from .fusion import birnn_forward, LevelSequence, make_fusion, self_attention_pool
from .heads import Labels, total_loss
from .model import Model
from .objective import regression_loss

STEP = 1e-4
TOL = 1e-3


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(TOL)

    @property
    def checked(self) -> int:
        return sum(self.report.checked.values())

    @property
    def skipped(self) -> int:
        return sum(self.report.skipped.values())


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _contract(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape))
    return lambda t: dc.tsum(dc.mul(t, w))


def _op_case(rng, build: Callable[..., Tensor], leaves: dict[str, Tensor], max_elements=None):
    probe = _contract(build(**leaves), rng)
    return dc.grad_check(lambda: probe(build(**leaves)), leaves, step=STEP,
                         max_elements=max_elements, skip_kinks=True)


def op_cases() -> dict[str, Callable[[np.random.Generator], GradCheckReport]]:
    return {
        "add (broadcast)": lambda r: _op_case(r, dc.add, {"a": _leaf(r, 3, 4), "b": _leaf(r, 4)}),
        "mul (broadcast)": lambda r: _op_case(r, dc.mul, {"a": _leaf(r, 2, 3, 4), "b": _leaf(r, 3, 1)}),
        "relu": lambda r: _op_case(r, dc.relu, {"x": _leaf(r, 4, 5)}),
        "sigmoid": lambda r: _op_case(r, dc.sigmoid, {"x": _leaf(r, 4, 5, scale=3)}),
        "tanh": lambda r: _op_case(r, dc.tanh, {"x": _leaf(r, 4, 5, scale=2)}),
        "reshape": lambda r: _op_case(r, lambda x: dc.reshape(x, (6, 2)), {"x": _leaf(r, 3, 4)}),
        "concat": lambda r: _op_case(r, lambda a, b: dc.concat([a, b], axis=1),
                                     {"a": _leaf(r, 2, 3), "b": _leaf(r, 2, 5)}),
        "stack": lambda r: _op_case(r, lambda a, b: dc.stack([a, b], axis=1),
                                    {"a": _leaf(r, 2, 3), "b": _leaf(r, 2, 3)}),
        "sum (axis)": lambda r: _op_case(r, lambda x: dc.tsum(x, axis=1, keepdims=True), {"x": _leaf(r, 3, 4, 2)}),
        "mean": lambda r: _op_case(r, dc.mean, {"x": _leaf(r, 3, 4)}),
        "dense": lambda r: _op_case(r, dc.dense, {"x": _leaf(r, 3, 5), "weight": _leaf(r, 5, 4),
                                                  "bias": _leaf(r, 4)}),
        "conv2d 3x3 pad 1": lambda r: _op_case(
            r, lambda x, k, b: dc.conv2d(x, k, b, 1, 1),
            {"x": _leaf(r, 2, 2, 5, 5), "k": _leaf(r, 3, 2, 3, 3), "b": _leaf(r, 3)}),
        "conv2d 5x5 stride 2": lambda r: _op_case(
            r, lambda x, k, b: dc.conv2d(x, k, b, 2, 2),
            {"x": _leaf(r, 1, 2, 7, 7), "k": _leaf(r, 2, 2, 5, 5), "b": _leaf(r, 2)}),
        "maxpool 2x2": lambda r: _op_case(r, lambda x: dc.maxpool2d(x, 2, 2), {"x": _leaf(r, 2, 2, 6, 6)}),
        "maxpool 3x3 stride 2": lambda r: _op_case(r, lambda x: dc.maxpool2d(x, 3, 2), {"x": _leaf(r, 1, 2, 7, 7)}),
        "upsample bilinear": lambda r: _op_case(r, lambda x: dc.upsample_bilinear(x, 7, 5),
                                                {"x": _leaf(r, 2, 2, 3, 2)}),
        "global avg pool": lambda r: _op_case(r, dc.global_avg_pool, {"x": _leaf(r, 2, 3, 4, 5)}),
        "softmax": lambda r: _op_case(r, lambda x: dc.softmax(x, axis=1), {"x": _leaf(r, 3, 6, scale=2)}),
        "cross entropy": lambda r: _op_case(r, lambda x: dc.cross_entropy(x, np.array([0, 6, 3])),
                                            {"x": _leaf(r, 3, 7, scale=2)}),
        "mse loss": lambda r: _op_case(r, lambda p: regression_loss(p, np.array([0.3, -0.8, 0.1]), "mse"),
                                       {"p": _leaf(r, 3, 1)}),
        "tukey loss": lambda r: _op_case(r, lambda p: regression_loss(p, np.array([0.3, -0.8, 4.0, -6.0]),
                                                                      "tukey", 4.685),
                                         {"p": _leaf(r, 4, 1)}),
        "attention block": _attention_case,
        "bi-rnn + attention pooling": _fusion_case,
    }


def _attention_case(rng) -> GradCheckReport:
    blk = make_block(rng, 2, 3, (8, 8), dtype=np.float64)
    x = _leaf(rng, 2, 2, 8, 8)
    return _op_case(rng, lambda x, **_: attention_block_forward(x, blk), {"x": x, **dict(blk.named("block"))},
                    max_elements=12)


def _fusion_case(rng) -> GradCheckReport:
    fusion = make_fusion(rng, [2, 2, 2], d=3, u=4, dtype=np.float64)
    xs = {f"x{i}": _leaf(rng, 2, 3) for i in range(3)}
    params = {**xs, **{k: v for k, v in fusion.named() if ".rnn." in k or ".attn." in k}}

    def build(**_):
        return self_attention_pool(birnn_forward(LevelSequence([xs[f"x{i}"] for i in range(3)]), fusion.rnn))

    return _op_case(rng, build, params)


def full_loss_case(rng, config: TrainConfig | None = None, max_elements: int = 4) -> GradCheckReport:
    """Full network plus combined loss on a 2-sample batch, float64."""
    config = config or TrainConfig()
    model = Model(config, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    size = config.input_size
    x = rng.uniform(0, 1, (2, 1, size, size))
    labels = Labels(np.array([0.4, -0.7]), np.array([-0.2, 0.9]), np.array([2, 5]))

    def f():
        out = model(x)
        return total_loss(out.clf_logits, out.valence, out.arousal, labels,
                          config.alpha, config.beta, config.loss, config.c)

    return dc.grad_check(f, dict(model.named_parameters()), step=STEP, max_elements=max_elements,
                         skip_kinks=True, seed=int(rng.integers(1 << 31)))


def run_suite(seed: int = 0, config: TrainConfig | None = None, full: bool = True) -> list[CaseResult]:
    results = []
    for name, case in op_cases().items():
        t0 = time.perf_counter()
        report = case(np.random.default_rng([seed, len(results)]))
        results.append(CaseResult(name, report, time.perf_counter() - t0))
    if full:
        t0 = time.perf_counter()
        report = full_loss_case(np.random.default_rng([seed, 999]), config)
        results.append(CaseResult("full network loss", report, time.perf_counter() - t0))
    return results


def format_results(results: list[CaseResult]) -> list[str]:
    lines = [f"{'case':30s} {'max rel err':>12s} {'checked':>8s} {'skipped':>8s}  result"]
    for r in results:
        lines.append(f"{r.name:30s} {r.report.max_error:12.3e} {r.checked:8d} {r.skipped:8d}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return lines
