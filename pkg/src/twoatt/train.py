"""Training, evaluation and ablation harness."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, augment, sample_rng, tta_predict
from .diffcore import NonFiniteError, Tensor
from .heads import combine_losses, total_loss
from .model import Model
from .objective import concordance, regression_loss, rmse

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("split", "epoch", "ccc_valence", "ccc_arousal", "ccc_mean",
                  "rmse_valence", "rmse_arousal", "rmse_mean")
CURVE_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_ccc_mean", "val_rmse_mean", "seconds")


def init_params(config: TrainConfig, seed: int | None = None, dtype=np.float32) -> Model:
    """He-normal convolutions, Xavier-uniform dense layers, zero biases."""
    return Model(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------- optimizer

def rmsprop_step(params: dict[str, Tensor], state: dict[str, np.ndarray], lr: float,
                 rho: float = 0.9, eps: float = 1e-8) -> None:
    """In-place update: v = rho v + (1 - rho) g^2; p -= lr g / sqrt(v + eps)."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise dc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise dc.ShapeError(f"optimizer state for {name} has shape {v.shape}, parameter {p.shape}")
        v = rho * v + (1.0 - rho) * (g * g)
        state[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * g / np.sqrt(v + eps)).astype(p.dtype, copy=False)


@dataclass
class PlateauSchedule:
    """Divide the learning rate by 10 when the loss stops improving."""

    lr: float
    patience: int = 1
    min_delta: float = 1e-4
    max_drops: int = 2
    best: float = float("inf")
    bad_epochs: int = 0
    drops: int = 0

    def update(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience and self.drops < self.max_drops:
                self.lr /= 10.0
                self.drops += 1
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "patience": self.patience, "min_delta": self.min_delta,
                "max_drops": self.max_drops, "best": self.best, "bad_epochs": self.bad_epochs,
                "drops": self.drops}


def lr_schedule_step(history: Sequence[float], initial_lr: float, patience: int = 1,
                     min_delta: float = 1e-4, max_drops: int = 2) -> float:
    """Learning rate in effect after the per-epoch losses in ``history``."""
    if not history:
        raise ValueError("history must not be empty")
    sched = PlateauSchedule(initial_lr, patience, min_delta, max_drops)
    for loss in history:
        sched.update(loss)
    return sched.lr


# ------------------------------------------------------------------ metrics

def targets_of(config_or_mode) -> tuple[str, ...]:
    mode = getattr(config_or_mode, "head_mode", config_or_mode)
    return {"single_v": ("valence",), "single_a": ("arousal",)}.get(mode, ("valence", "arousal"))


def metric_report(truth: Dataset, preds: dict[str, np.ndarray], targets: Iterable[str]) -> dict:
    report: dict = {}
    cccs, rmses = [], []
    for t in targets:
        y = getattr(truth, t)
        result = concordance(y, preds[t])
        report[f"ccc_{t}"] = result.value
        report[f"ccc_{t}_degenerate"] = result.degenerate
        report[f"rmse_{t}"] = rmse(y, preds[t])
        cccs.append(result.value)
        rmses.append(report[f"rmse_{t}"])
    report["ccc_mean"] = float(np.mean(cccs))
    report["rmse_mean"] = float(np.mean(rmses))
    return report


def metric_columns(targets: Sequence[str]) -> list[str]:
    return [c for c in METRIC_COLUMNS
            if not any(c.endswith("_" + t) for t in ("valence", "arousal") if t not in targets)]


def fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".8g")
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def predict_tta(model: Model, data: Dataset) -> dict[str, np.ndarray]:
    return tta_predict(model.predict, data.images)


def prediction_loss(preds: dict[str, np.ndarray], data: Dataset, config: TrainConfig) -> float:
    """Training objective evaluated on stored predictions (rows without an expression skip the classifier term)."""
    with dc.no_grad():
        l_clf = l_v = l_a = None
        if "logits" in preds:
            labeled = data.expression >= 0
            if labeled.any():
                l_clf = dc.cross_entropy(Tensor(preds["logits"][labeled]), data.expression[labeled]).item()
        if "valence" in preds:
            l_v = regression_loss(Tensor(preds["valence"]), data.valence, config.loss, config.c).item()
        if "arousal" in preds:
            l_a = regression_loss(Tensor(preds["arousal"]), data.arousal, config.loss, config.c).item()
        return float(combine_losses(l_clf, l_a, l_v, config.alpha, config.beta))


def evaluate(model_or_ckpt, data: Dataset) -> dict:
    """CCC and RMSE per target (plus means) from flip-averaged predictions."""
    model = _as_model(model_or_ckpt)
    preds = predict_tta(model, data)
    return metric_report(data, preds, targets_of(model.config))


def classify_eval(model_or_ckpt, data: Dataset) -> float:
    """Seven-way accuracy of the categorical branch over labeled rows."""
    model = _as_model(model_or_ckpt)
    if model.heads.clf_out is None:
        raise ValueError(f"model has no classifier head (head_mode={model.config.head_mode}); "
                         "classification needs head_mode=2mt")
    labeled = data.expression >= 0
    if not labeled.any():
        raise ValueError("no rows carry an expression label")
    logits = predict_tta(model, data)["logits"]
    return float(np.mean(logits[labeled].argmax(axis=1) == data.expression[labeled]))


def _as_model(obj) -> Model:
    if isinstance(obj, Model):
        return obj
    if isinstance(obj, Checkpoint):
        return obj.model
    return load_checkpoint(obj).model


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_ccc: float = float("-inf")
    best_params: dict[str, np.ndarray] | None = None


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_step(model: Model, x: np.ndarray, labels, config: TrainConfig, state: dict, lr: float) -> float:
    model.zero_grad()
    out = model(x)
    loss = total_loss(out.clf_logits, out.valence, out.arousal, labels,
                      config.alpha, config.beta, config.loss, config.c)
    dc.check_finite(loss)
    loss.backward()
    for name, p in model.named_parameters().items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}", op=name)
    rmsprop_step(model.named_parameters(), state, lr, config.rho, config.eps)
    return loss.item()


def train(config: TrainConfig, train_data: Dataset, val_data: Dataset, out_dir=None,
          plots: bool = True, progress: bool = False) -> TrainResult:
    """Train with RMSProp and plateau decay; keep the epoch with best val mean CCC.

    With ``out_dir`` set, writes metrics.csv, learning_curve.csv, config.txt,
    best.ckpt, last.ckpt and (if ``plots``) learning_curve.png.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.dumps(), encoding="utf-8")
    model = init_params(config, config.seed)
    targets = targets_of(config)
    state: dict[str, np.ndarray] = {}
    sched = PlateauSchedule(config.lr, config.plateau_patience, config.min_delta, config.max_lr_drops)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(model)
    n = len(train_data)
    steps = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        total, seen = 0.0, 0
        for idx in batches(n, config.batch_size, shuffle_rng):
            x = np.stack([augment(train_data.images[i], sample_rng(config.seed, epoch, int(i))) for i in idx])
            try:
                loss = train_step(model, x, train_data.labels(idx), config, state, lr)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}: {exc}", op=exc.op) from exc
            total += loss * len(idx)
            seen += len(idx)
            steps += 1
        train_loss = total / seen
        preds = predict_tta(model, val_data)
        report = metric_report(val_data, preds, targets)
        val_loss = prediction_loss(preds, val_data, config)
        row = {"split": "val", "epoch": epoch, **{k: report[k] for k in report if not k.endswith("degenerate")}}
        result.metrics.append(row)
        # the deterministic validation loss drives the plateau rule; the
        # augmented training loss is too noisy for a patience of one epoch
        if steps > config.warmup_steps:
            sched.update(val_loss)
        result.curve.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss,
                             "val_ccc_mean": report["ccc_mean"], "val_rmse_mean": report["rmse_mean"],
                             "seconds": time.perf_counter() - t0})
        if progress:
            log.info("epoch %d lr %.1e loss %.5f val loss %.5f ccc %.4f rmse %.4f", epoch, lr, train_loss,
                     val_loss, report["ccc_mean"], report["rmse_mean"])
        if report["ccc_mean"] > result.best_ccc:
            result.best_ccc = report["ccc_mean"]
            result.best_epoch = epoch
            result.best_params = {k: v.copy() for k, v in model.state_arrays().items()}
            if out is not None:
                save_checkpoint(out / "best.ckpt", Checkpoint(
                    model, dict(state), epoch, shuffle_rng.bit_generator.state, sched.state()))
        if out is not None:
            _write_reports(out, result, targets, plots and epoch == config.epochs)
    if out is not None:
        save_checkpoint(out / "last.ckpt", Checkpoint(
            model, dict(state), config.epochs, shuffle_rng.bit_generator.state, sched.state()))
    if result.best_params is not None:
        model.load_arrays(result.best_params)
    return result


def _write_reports(out: Path, result: TrainResult, targets, plots: bool) -> None:
    write_csv(out / "metrics.csv", metric_columns(targets), result.metrics)
    # wall-clock seconds stay out of the CSV so reruns are byte-identical
    write_csv(out / "learning_curve.csv", CURVE_COLUMNS[:-1], result.curve)
    if plots:
        from .plots import plot_learning_curve

        plot_learning_curve(result.curve, out / "learning_curve.png")


# ------------------------------------------------------------------ ablation

ABLATION_AXES = ("blocks", "attention_mode", "head_mode", "loss", "n_dim", "n_cat", "hidden")
SINGLE = "single"


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of axis values; an empty grid yields no configurations."""
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def parse_grid(text: str) -> dict[str, list[str]]:
    """``"loss=mse,tukey;blocks=1,2,3"`` -> {"loss": ["mse", "tukey"], "blocks": ["1", "2", "3"]}."""
    grid: dict[str, list[str]] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ValueError(f"bad grid axis {part!r}; expected key=v1,v2")
        key, values = part.split("=", 1)
        key = key.strip()
        if key not in ABLATION_AXES and key not in TrainConfig.__dataclass_fields__:
            raise ValueError(f"unknown ablation axis {key!r}")
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
    return grid


def _overrides(point: dict) -> dict:
    out = dict(point)
    hidden = out.pop("hidden", None)
    if hidden is not None:
        # "256x128" -> n_dim=256, n_cat=128
        d, c = str(hidden).lower().split("x")
        out["n_dim"], out["n_cat"] = d, c
    return out


def label_of(point: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in point.items())


def _run_one(base: TrainConfig, point: dict, seed: int, train_data: Dataset, val_data: Dataset) -> dict:
    overrides = _overrides(point)
    mode = str(overrides.get("head_mode", base.head_mode))
    if mode == SINGLE:
        # one single-task network per target, reported side by side
        report = {}
        for sub, target in (("single_v", "valence"), ("single_a", "arousal")):
            cfg = base.replace(**{**overrides, "head_mode": sub, "seed": seed})
            res = train(cfg, train_data, val_data, plots=False)
            r = evaluate(res.model, val_data)
            report[f"ccc_{target}"] = r[f"ccc_{target}"]
            report[f"rmse_{target}"] = r[f"rmse_{target}"]
        report["ccc_mean"] = (report["ccc_valence"] + report["ccc_arousal"]) / 2
        report["rmse_mean"] = (report["rmse_valence"] + report["rmse_arousal"]) / 2
        return report
    cfg = base.replace(**{**overrides, "seed": seed})
    res = train(cfg, train_data, val_data, plots=False)
    r = evaluate(res.model, val_data)
    return {k: v for k, v in r.items() if not k.endswith("degenerate")}


ABLATION_COLUMNS = ("config", "seeds", "status", "ccc_valence", "ccc_arousal", "ccc_mean",
                    "rmse_valence", "rmse_arousal", "rmse_mean")
RUN_COLUMNS = ("config", "seed", "status") + ABLATION_COLUMNS[3:] + ("error",)


def ablate(points: Sequence[dict], base: TrainConfig, train_data: Dataset, val_data: Dataset,
           seeds: Sequence[int] = (0,), out_dir=None, plots: bool = True) -> list[dict]:
    """Train every configuration on the same data for each seed; one averaged row per config.

    A configuration whose runs raise is kept as a row with ``status=failed``.
    """
    rows, runs = [], []
    seen = set()
    for point in points:
        label = label_of(point)
        if label in seen:
            continue
        seen.add(label)
        reports = []
        status = "ok"
        for seed in seeds:
            try:
                rep = _run_one(base, point, seed, train_data, val_data)
                reports.append(rep)
                runs.append({"config": label, "seed": seed, "status": "ok", **rep})
            except Exception as exc:  # noqa: BLE001 - the row records the failure
                log.exception("ablation run %s seed %s failed", label, seed)
                status = "failed"
                runs.append({"config": label, "seed": seed, "status": "failed", "error": repr(exc)})
        row = {"config": label, "seeds": len(reports), "status": status, **point}
        for col in ABLATION_COLUMNS[3:]:
            vals = [r[col] for r in reports if col in r]
            if vals:
                row[col] = float(np.mean(vals))
        rows.append(row)
        log.info("ablation %s: %s", label, {k: row.get(k) for k in ("ccc_mean", "rmse_mean")})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
        write_csv(out / "ablation_runs.csv", RUN_COLUMNS, runs)
        if plots and rows:
            from .plots import plot_ablation

            plot_ablation(rows, out / "ablation.png")
    return rows


def split_dataset(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 2])
    order = rng.permutation(len(data))
    n_val = max(1, int(round(val_fraction * len(data))))
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))
