"""Rank hypothesis functions by the held-out error of segmenters trained on them.

A hypothesis that matches how the surface really changes with the label
should be learnable, so it yields low validation error; implausible ones
(non-monotone, say) cannot be fit and score badly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .hypotheses import Hypothesis, is_constant, monotonicity_check
from .models import Model, ModelConfig, build_segmenter
from .synth import Dataset
from .training import RunMetrics, TrainConfig, per_label_means, train_segmenter, write_rows


@dataclass
class HypothesisEntry:
    name: str
    spec: str
    train_mse: float
    val_mse: float
    test_mse: float
    table: list[tuple[int, float, float]]  # (label, g(t), mean prediction on val)
    monotonicity: str
    constant: bool
    true_ratio_mse: float = math.nan  # val-split error against the generator's true ratios
    metrics: RunMetrics | None = field(default=None, repr=False)
    model: Model | None = field(default=None, repr=False)

    def mse(self, split: str) -> float:
        return getattr(self, f"{split}_mse")


@dataclass
class HypothesisReport:
    entries: list[HypothesisEntry]  # ranked, best first

    @property
    def ranking(self) -> list[str]:
        return [e.name for e in self.entries]

    def __getitem__(self, name: str) -> HypothesisEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def summary(self) -> dict:
        return {
            "ranking": [
                {"rank": i + 1, "hypothesis": e.name, "spec": e.spec, "val_mse": e.val_mse,
                 "monotonicity": e.monotonicity, "constant": e.constant}
                for i, e in enumerate(self.entries)
            ]
        }

    def write(self, out_dir: str | os.PathLike) -> None:
        os.makedirs(out_dir, exist_ok=True)
        rows = [{"hypothesis": e.name, "split": s, "mse": e.mse(s)}
                for e in self.entries for s in ("train", "val", "test")]
        write_rows(os.path.join(out_dir, "hypotheses.csv"), ["hypothesis", "split", "mse"], rows)
        rows = [{"hypothesis": e.name, "label": t, "target_g": g, "mean_prediction": m}
                for e in self.entries for t, g, m in e.table]
        write_rows(os.path.join(out_dir, "hypotheses_per_label.csv"),
                   ["hypothesis", "label", "target_g", "mean_prediction"], rows)
        with open(os.path.join(out_dir, "ranking.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)


def evaluate_hypothesis(h: Hypothesis, dataset: Dataset, model_config: ModelConfig,
                        train_config: TrainConfig, keep_model: bool = False) -> HypothesisEntry:
    model = build_segmenter(model_config, seed=train_config.seed, dtype=train_config.dtype)
    m = train_segmenter(model, dataset, h, train_config)
    table = [(t, g, pred) for t, (g, pred) in sorted(per_label_means(m, "val").items())]
    return HypothesisEntry(
        name=h.name,
        spec=h.spec(),
        train_mse=m.summary["train_mse"],
        val_mse=m.summary["val_mse"],
        test_mse=m.summary["test_mse"],
        table=table,
        monotonicity=monotonicity_check(h),
        constant=is_constant(h),
        true_ratio_mse=m.summary["val_true_ratio_mse"],
        metrics=m,
        model=model if keep_model else None,
    )


def rank_hypotheses(hypotheses: list[Hypothesis], dataset: Dataset, model_config: ModelConfig,
                    train_config: TrainConfig, keep_models: bool = False) -> HypothesisReport:
    if not hypotheses:
        raise ValueError("need at least one hypothesis")
    entries = [evaluate_hypothesis(h, dataset, model_config, train_config, keep_models) for h in hypotheses]
    entries.sort(key=lambda e: (e.val_mse if not math.isnan(e.val_mse) else math.inf, e.name))
    return HypothesisReport(entries)


def constant_predictor_bound(h: Hypothesis, labels) -> float:
    """MSE of the best constant output against ``h`` over the given labels (its variance)."""
    g = np.array([h(int(t)) for t in labels])
    return float(np.mean((g - g.mean()) ** 2))
