"""Accuracy, macro-F1, macro one-vs-rest AUROC and fold aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("auroc_macro", "accuracy", "f1_macro")


def predict_labels(probs) -> np.ndarray:
    """Argmax with ties to the lowest class index."""
    return np.asarray(probs).argmax(axis=1)


def _check(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds and labels differ in length ({preds.shape} vs {labels.shape})")
    if labels.size == 0:
        raise ValueError("empty input")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds, labels = _check(preds, labels)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1; any 0/0 precision, recall or F1 counts as 0."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    f1 = np.zeros(num_classes)
    for c in range(num_classes):
        p = tp[c] / pred_pos[c] if pred_pos[c] else 0.0
        r = tp[c] / true_pos[c] if true_pos[c] else 0.0
        f1[c] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return float(f1.mean())


def ovr_auroc(scores, positive) -> float:
    """Mann-Whitney U / (n_pos n_neg), ties credited 1/2 (via average ranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks; sums of half-integers stay exact
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def macro_auroc(scores, labels, num_classes: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != (labels.size, num_classes):
        raise ValueError(f"scores shape {scores.shape} != ({labels.size}, {num_classes})")
    present = np.bincount(labels, minlength=num_classes)
    if np.count_nonzero(present) < 2:
        raise ValueError("macro AUROC needs at least two classes among the labels")
    absent = [c for c in range(num_classes) if present[c] == 0]
    if absent:
        raise ValueError(f"class(es) {absent} absent from labels; stratify the evaluation split")
    return float(np.mean([ovr_auroc(scores[:, c], labels == c) for c in range(num_classes)]))


@dataclass
class EvalResult:
    auroc_macro: float
    accuracy: float
    f1_macro: float
    confusion: np.ndarray

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def evaluate(probs, labels, num_classes: int) -> EvalResult:
    preds = predict_labels(probs)
    return EvalResult(
        macro_auroc(probs, labels, num_classes),
        accuracy(preds, labels),
        macro_f1(preds, labels, num_classes),
        confusion_matrix(preds, labels, num_classes),
    )


@dataclass
class FoldSummary:
    folds: list[EvalResult]
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)
    sd_defined: bool = True


def summarize_folds(results: list[EvalResult]) -> FoldSummary:
    if not results:
        raise ValueError("no fold results to summarize")
    summary = FoldSummary(list(results), sd_defined=len(results) >= 2)
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in results])
        summary.mean[name] = float(vals.mean())
        summary.sd[name] = float(vals.std(ddof=1)) if len(vals) >= 2 else 0.0
    return summary


def _num(v: float) -> str:
    return repr(float(v))


def write_summary_csv(summary: FoldSummary, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *METRIC_NAMES])
        for i, r in enumerate(summary.folds):
            w.writerow([i, *(_num(getattr(r, m)) for m in METRIC_NAMES)])
        w.writerow(["mean", *(_num(summary.mean[m]) for m in METRIC_NAMES)])
        w.writerow(["sd", *(_num(summary.sd[m]) for m in METRIC_NAMES)])


def summary_to_dict(summary: FoldSummary) -> dict:
    return {
        "folds": [{**r.row(), "fold": i, "confusion": r.confusion.tolist()} for i, r in enumerate(summary.folds)],
        "mean": summary.mean,
        "sd": summary.sd,
        "sd_defined": summary.sd_defined,
    }


def write_summary_json(summary: FoldSummary, path):
    Path(path).write_text(json.dumps(summary_to_dict(summary), indent=2) + "\n", encoding="utf-8")
