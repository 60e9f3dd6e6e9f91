"""Regression/classification metrics and cross-validation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def rmse_mae_mape(pred: Sequence[float], truth: Sequence[float]):
    """RMSE, MAE and MAPE (percent). MAPE is ``None`` when any truth is zero."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or p.shape != t.shape:
        raise MetricError(f"need equal non-empty inputs, got {p.size} and {t.size}")
    err = p - t
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    mape = None if np.any(t == 0) else float(100.0 * np.mean(np.abs(err) / np.abs(t)))
    return rmse, mae, mape


def mape(pred, truth) -> float:
    t = np.asarray(truth, dtype=np.float64)
    if np.any(t == 0):
        raise MetricError("MAPE is undefined when a true value is zero")
    return rmse_mae_mape(pred, truth)[2]


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def naive_rul_baseline(train_ruls: Sequence[float], eval_ruls: Sequence[float]) -> float:
    """RMSE of predicting the mean training RUL for every evaluated cell."""
    train = np.asarray(train_ruls, dtype=np.float64)
    if train.size == 0:
        raise MetricError("naive baseline needs training RULs")
    const = float(train.mean())
    return rmse_mae_mape(np.full(len(eval_ruls), const), eval_ruls)[0]


def spearman(a, b) -> float:
    ra, rb = rankdata(a), rankdata(b)
    return float(np.corrcoef(ra, rb)[0, 1])


@dataclass
class MetricReport:
    task: str
    dataset: str
    per_fold: dict = field(default_factory=dict)  # metric -> list of per-fold values
    config: dict = field(default_factory=dict)
    seed: int = 0

    def add(self, metric: str, value: Optional[float]) -> None:
        self.per_fold.setdefault(metric, []).append(math.nan if value is None else float(value))

    @property
    def folds(self) -> int:
        return max((len(v) for v in self.per_fold.values()), default=0)

    def mean(self, metric: str) -> float:
        return float(np.nanmean(self.per_fold[metric]))

    def std(self, metric: str) -> float:
        """Population standard deviation across folds."""
        return float(np.nanstd(self.per_fold[metric]))

    def rows(self) -> list:
        out = []
        for metric, vals in self.per_fold.items():
            for i, v in enumerate(vals):
                out.append((metric, str(i), v))
            out.append((metric, "mean", self.mean(metric)))
            out.append((metric, "std", self.std(metric)))
        return out

    def write(self, directory, stem: str = "metrics") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = directory / f"{stem}.csv", directory / f"{stem}_summary.txt"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("metric", "fold", "value"))
            for metric, fold, v in self.rows():
                w.writerow((metric, fold, repr(v)))
        txt_path.write_text(self.summary(), encoding="utf-8")
        return csv_path, txt_path

    def summary(self) -> str:
        lines = [f"task = {self.task}", f"dataset = {self.dataset}", f"seed = {self.seed}",
                 f"folds = {self.folds}"]
        for metric in self.per_fold:
            lines.append(f"{metric} = {self.mean(metric):.6g} +/- {self.std(metric):.6g}")
        lines.append("# resolved configuration")
        lines += [f"{k} = {v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"


def read_metric_csv(path) -> dict:
    """``{metric: [per-fold values]}`` from a report CSV (mean/std rows skipped)."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["fold"].isdigit():
                out.setdefault(row["metric"], []).append(float(row["value"]))
    return out
