"""Optimizer, losses, training loops, grid search and evaluation metrics."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, backward, make_result, mean_all, no_grad, square, sub
from .hypotheses import Hypothesis
from .models import Model, ModelConfig, build_classifier, build_segmenter, spatial_mean
from .synth import Dataset

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    precision: int = 64
    shuffle: bool = True

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.eps <= 0 or self.lr < 0:
            raise ValueError("eps must be > 0 and lr >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise TrainingError(f"parameter {i} has no gradient")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.config)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- losses ------------------------------------------------------------------

def cross_entropy_loss(probs: Tensor, labels) -> Tensor:
    """``-mean(log p[label])`` with probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    rows = np.arange(b)
    picked = probs.data[rows, labels]
    floored = np.maximum(picked, PROB_FLOOR)
    loss = np.asarray(-np.log(floored).mean(), dtype=probs.dtype)

    def _backward(g):
        d = np.zeros_like(probs.data)
        d[rows, labels] = np.where(picked > PROB_FLOOR, -1.0 / (b * floored), 0.0) * g
        return ((probs, d),)

    return make_result(loss, (probs,), _backward)


def weak_label_loss(mask: Tensor, target) -> Tensor:
    """Squared error between each sample's mask mean and its scalar target, averaged over the batch."""
    m = spatial_mean(mask)
    t = np.broadcast_to(np.asarray(target, dtype=mask.dtype), m.shape)
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("weak-label targets must lie in [0, 1]")
    return mean_all(square(sub(m, Tensor(t.copy()))))


def confusion_matrix(predictions, labels, k: int) -> np.ndarray:
    """``cm[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
        raise ValueError(f"class indices must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


# -- metrics -----------------------------------------------------------------

@dataclass
class RunMetrics:
    records: list[dict] = field(default_factory=list)
    confusion: np.ndarray | None = None
    per_label: list[dict] = field(default_factory=list)
    predictions: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.records.append({"epoch": epoch, "split": split, "metric": metric, "value": float(value)})

    def series(self, split: str, metric: str) -> list[float]:
        return [r["value"] for r in self.records if r["split"] == split and r["metric"] == metric]

    def final(self, split: str, metric: str) -> float:
        return self.summary[f"{split}_{metric}"]

    def write(self, out_dir: str | os.PathLike) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), self.records)
        if self.confusion is not None:
            write_confusion_csv(os.path.join(out_dir, "confusion.csv"), self.confusion)
        if self.per_label:
            write_rows(os.path.join(out_dir, "per_label.csv"), ["split", "label", "target_g", "mean_prediction"],
                       self.per_label)
        if self.predictions:
            write_rows(os.path.join(out_dir, "predictions.csv"), ["split", "label", "prediction"], self.predictions)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def write_metrics_csv(path, records: Sequence[dict]) -> None:
    write_rows(path, ["epoch", "split", "metric", "value"], records)


def write_confusion_csv(path, cm: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in cm:
            w.writerow([int(v) for v in row])


# -- evaluation helpers ------------------------------------------------------

def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def predict(model: Model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode forward over ``images``: class probabilities or masks."""
    outs = []
    with no_grad():
        for idx in _batches(len(images), batch_size):
            outs.append(model(Tensor(images[idx].astype(model.dtype)), training=False).data)
    if not outs:
        return np.zeros((0,))
    return np.concatenate(outs)


def _check_dataset(model: Model, dataset: Dataset) -> None:
    model.config.check_input_size(dataset.size)
    if tuple(model.config.input_size) != tuple(dataset.size):
        raise ShapeError(f"model input size {model.config.input_size} != dataset size {dataset.size}")
    if len(dataset["train"]) == 0:
        raise TrainingError("training split is empty")


def _train_epoch(model: Model, opt: Adam, images: np.ndarray, rng: np.random.Generator, config: TrainConfig,
                 loss_fn: Callable[[Tensor, np.ndarray], Tensor]) -> float:
    n = len(images)
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    total = 0.0
    for idx in _batches(n, config.batch_size, order):
        out = model(Tensor(images[idx].astype(model.dtype)), training=True)
        loss = loss_fn(out, idx)
        backward(loss)
        opt.step()
        opt.zero_grad()
        total += float(loss.data) * len(idx)
    return total / n


def train_classifier(model: Model, dataset: Dataset, config: TrainConfig) -> RunMetrics:
    if model.kind != "classifier":
        raise TrainingError("train_classifier needs a classifier model")
    _check_dataset(model, dataset)
    lo, hi = dataset.label_range
    k = model.config.num_classes
    if hi - lo + 1 > k:
        raise TrainingError(f"{hi - lo + 1} labels but the classifier has {k} outputs")
    tr = dataset["train"]
    y_train = tr.labels - lo
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config)
    metrics = RunMetrics()
    best = (-1.0, 0)

    def evaluate(split):
        s = dataset[split]
        if len(s) == 0:
            return math.nan, math.nan, np.zeros(0, dtype=np.int64)
        probs = predict(model, s.images, config.batch_size)
        y = s.labels - lo
        loss = float(cross_entropy_loss(Tensor(probs), y).data)
        pred = np.argmax(probs, axis=1)
        return loss, float(np.mean(pred == y)), pred

    for epoch in range(1, config.epochs + 1):
        train_loss = _train_epoch(model, opt, tr.images, rng, config,
                                  lambda out, idx: cross_entropy_loss(out, y_train[idx]))
        metrics.add(epoch, "train", "loss", train_loss)
        vloss, vacc, _ = evaluate("val")
        metrics.add(epoch, "val", "loss", vloss)
        metrics.add(epoch, "val", "accuracy", vacc)
        if vacc > best[0]:
            best = (vacc, epoch)
        logger.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f", epoch, train_loss, vloss, vacc)

    final_epoch = config.epochs
    for split in ("train", "val", "test"):
        loss, acc, pred = evaluate(split)
        metrics.add(final_epoch, split, "final_loss", loss)
        metrics.add(final_epoch, split, "final_accuracy", acc)
        metrics.summary[f"{split}_loss"] = loss
        metrics.summary[f"{split}_accuracy"] = acc
        s = dataset[split]
        for lab, p in zip(s.labels, pred):
            metrics.predictions.append({"split": split, "label": int(lab), "prediction": int(p) + lo})
        if split == "test":
            metrics.confusion = confusion_matrix(pred, s.labels - lo, hi - lo + 1)
    metrics.summary["best_val_accuracy"], metrics.summary["best_val_epoch"] = best
    return metrics


def train_segmenter(model: Model, dataset: Dataset, hypothesis: Hypothesis, config: TrainConfig) -> RunMetrics:
    """Fit the mask mean of every training image to ``hypothesis(label)``."""
    if model.kind != "segmenter":
        raise TrainingError("train_segmenter needs a segmenter model")
    _check_dataset(model, dataset)
    lo, hi = dataset.label_range
    hlo, hhi = hypothesis.label_range
    if lo < hlo or hi > hhi:
        raise TrainingError(f"hypothesis {hypothesis.name} is not defined on labels [{lo}, {hi}]")
    table = {t: hypothesis(t) for t in range(lo, hi + 1)}
    tr = dataset["train"]
    g_train = np.array([table[int(t)] for t in tr.labels])
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config)
    metrics = RunMetrics()

    def evaluate(split):
        s = dataset[split]
        if len(s) == 0:
            return math.nan, np.zeros(0), np.zeros((0,) + tuple(dataset.size))
        masks = predict(model, s.images, config.batch_size)[:, 0]
        means = masks.reshape(len(s), -1).mean(axis=1)
        g = np.array([table[int(t)] for t in s.labels])
        return float(np.mean((means - g) ** 2)), means, masks

    best = (math.inf, 0)
    for epoch in range(1, config.epochs + 1):
        train_loss = _train_epoch(model, opt, tr.images, rng, config,
                                  lambda out, idx: weak_label_loss(out, g_train[idx]))
        metrics.add(epoch, "train", "loss", train_loss)
        for split in ("val", "test"):
            mse, _, _ = evaluate(split)
            metrics.add(epoch, split, "mse", mse)
            if split == "val" and mse < best[0]:
                best = (mse, epoch)
        logger.info("epoch %d train_loss %.5f val_mse %.5f", epoch, train_loss, metrics.series("val", "mse")[-1])

    final_epoch = config.epochs
    for split in ("train", "val", "test"):
        mse, means, masks = evaluate(split)
        s = dataset[split]
        metrics.add(final_epoch, split, "final_mse", mse)
        metrics.summary[f"{split}_mse"] = mse
        if len(s):
            true_mse = float(np.mean((means - s.true_ratio) ** 2))
            agreement = float(np.mean((masks >= 0.5) == (s.masks > 0)))
        else:
            true_mse = agreement = math.nan
        metrics.add(final_epoch, split, "true_ratio_mse", true_mse)
        metrics.add(final_epoch, split, "pixel_agreement", agreement)
        metrics.summary[f"{split}_true_ratio_mse"] = true_mse
        metrics.summary[f"{split}_pixel_agreement"] = agreement
        for t in range(lo, hi + 1):
            sel = s.labels == t
            if sel.any():
                metrics.per_label.append({"split": split, "label": t, "target_g": table[t],
                                          "mean_prediction": float(means[sel].mean())})
        for lab, m in zip(s.labels, means):
            metrics.predictions.append({"split": split, "label": int(lab), "prediction": float(m)})
    metrics.summary["best_val_mse"], metrics.summary["best_val_epoch"] = best
    return metrics


def per_label_means(metrics: RunMetrics, split: str) -> dict[int, tuple[float, float]]:
    """``{label: (target_g, mean_prediction)}`` for one split."""
    return {r["label"]: (r["target_g"], r["mean_prediction"]) for r in metrics.per_label if r["split"] == split}


# -- grid search -------------------------------------------------------------

@dataclass
class GridResult:
    config: ModelConfig
    status: str
    metric: float | None = None
    parameter_count: int | None = None
    error: str | None = None
    metrics: RunMetrics | None = None
    model: Model | None = None
    train_config: TrainConfig | None = None


_TRAIN_KEYS = frozenset(TrainConfig.__dataclass_fields__) - {"seed"}


def _split_cell(cell, dataset: Dataset, config: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    """Model config plus the run config, with any per-cell training overrides (never the seed)."""
    if isinstance(cell, ModelConfig):
        return cell, config
    d = dict(cell)
    overrides = {k: d.pop(k) for k in list(d) if k in _TRAIN_KEYS}
    d.setdefault("input_size", tuple(dataset.size))
    d.setdefault("num_classes", dataset.label_range[1] - dataset.label_range[0] + 1)
    return ModelConfig(**d), replace(config, **overrides)


def grid_search(grid: Sequence, dataset: Dataset, config: TrainConfig, task: str = "classifier",
                hypothesis: Hypothesis | None = None) -> list[GridResult]:
    """Train every cell with the same seed; best first, failed cells last.

    A cell is a :class:`ModelConfig` or a dict of its fields, optionally with
    training overrides such as ``lr`` or ``epochs``. Classifier cells rank by
    final validation accuracy, segmenter cells by final validation MSE. Ties
    go to the smaller model, then the smaller config tuple.
    """
    if not grid:
        raise ValueError("empty grid")
    if task not in ("classifier", "seg"):
        raise ValueError(f"task must be 'classifier' or 'seg', got {task!r}")
    if task == "seg" and hypothesis is None:
        raise ValueError("segmenter grid search needs a hypothesis")
    results = []
    for cell in grid:
        try:
            mc, tc = _split_cell(cell, dataset, config)
        except (TypeError, ValueError) as exc:
            results.append(GridResult(ModelConfig(), "failed", error=f"bad cell {cell!r}: {exc}"))
            continue
        try:
            if task == "classifier":
                model = build_classifier(mc, seed=tc.seed, dtype=tc.dtype)
                m = train_classifier(model, dataset, tc)
                metric = m.summary["val_accuracy"]
            else:
                model = build_segmenter(mc, seed=tc.seed, dtype=tc.dtype)
                m = train_segmenter(model, dataset, hypothesis, tc)
                metric = m.summary["val_mse"]
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            logger.warning("grid cell %s failed: %s", mc, exc)
            results.append(GridResult(mc, "failed", error=str(exc), train_config=tc))
            continue
        results.append(GridResult(mc, "ok", metric, model.parameter_count(), metrics=m, model=model,
                                  train_config=tc))

    sign = -1.0 if task == "classifier" else 1.0
    ok = [r for r in results if r.status == "ok"]
    ok.sort(key=lambda r: (sign * r.metric if not math.isnan(r.metric) else math.inf,
                           r.parameter_count, r.config.key()))
    return ok + [r for r in results if r.status != "ok"]
