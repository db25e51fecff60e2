"""Binary classification metrics and repeated-retrain evaluation.

Confusion counts are real-valued because reports average matrices over many
retrains. Zero-denominator cases return 0 (with the exception of accuracy
on an empty matrix, which is an error) so a hyperparameter search never
dies on a degenerate classifier. Orientation is fixed: positive = defect.

The signal-to-noise statistic is peak response inside the defect footprint
over mean response outside it; a noiseless background yields infinity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scandata import CScanImage

__all__ = [
    "ConfusionMatrix",
    "EvalReport",
    "accuracy",
    "confusion_from_predictions",
    "f1",
    "format_report_table",
    "precision",
    "recall",
    "repeated_eval",
    "snr",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: float
    fp: float
    fn: float
    tn: float

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> float:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_from_predictions(truth, predicted) -> ConfusionMatrix:
    t = np.asarray(truth, dtype=bool)
    p = np.asarray(predicted, dtype=bool)
    if t.shape != p.shape:
        raise ValueError("truth and prediction lengths differ")
    return ConfusionMatrix(tp=float(np.sum(t & p)), fp=float(np.sum(~t & p)),
                           fn=float(np.sum(t & ~p)), tn=float(np.sum(~t & ~p)))


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    return cm.tp / denom if denom > 0 else 0.0


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    return cm.tp / denom if denom > 0 else 0.0


def f1(cm: ConfusionMatrix) -> float:
    p, r = precision(cm), recall(cm)
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy undefined for an empty matrix")
    return (cm.tp + cm.tn) / cm.total


@dataclass(frozen=True)
class EvalReport:
    """Per-metric means and standard deviations over repeated retrains."""

    n_runs: int
    mean_accuracy: float
    std_accuracy: float
    mean_precision: float
    std_precision: float
    mean_recall: float
    std_recall: float
    mean_f1: float
    std_f1: float
    mean_confusion: ConfusionMatrix

    def __post_init__(self):
        for name in ("mean_accuracy", "mean_precision", "mean_recall",
                     "mean_f1"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"n_runs": self.n_runs,
                "accuracy": {"mean": self.mean_accuracy,
                             "std": self.std_accuracy},
                "precision": {"mean": self.mean_precision,
                              "std": self.std_precision},
                "recall": {"mean": self.mean_recall, "std": self.std_recall},
                "f1": {"mean": self.mean_f1, "std": self.std_f1},
                "confusion": self.mean_confusion.to_dict()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2,
                                         sort_keys=True))


def repeated_eval(dataset_train, dataset_test, cfg, n_runs: int,
                  rng: np.random.Generator,
                  max_epochs: int | None = None) -> EvalReport:
    """Train n_runs fresh models and average test metrics across them.

    Per-run metrics are averaged directly (the mean F1 of runs, not the F1
    of the mean matrix); the averaged confusion matrix is reported as well.
    """
    from . import tinynn

    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    x_test, y_test = tinynn._dataset_arrays(dataset_test)
    per_run = {"accuracy": [], "precision": [], "recall": [], "f1": []}
    matrices = []
    for _ in range(n_runs):
        model = tinynn.build_model(cfg, rng)
        tinynn.train(model, dataset_train, cfg, rng, max_epochs=max_epochs)
        predicted = tinynn.predict_labels(model, x_test)
        cm = confusion_from_predictions(y_test.astype(bool), predicted)
        matrices.append(cm)
        per_run["accuracy"].append(accuracy(cm))
        per_run["precision"].append(precision(cm))
        per_run["recall"].append(recall(cm))
        per_run["f1"].append(f1(cm))
    mean_cm = ConfusionMatrix(
        tp=float(np.mean([m.tp for m in matrices])),
        fp=float(np.mean([m.fp for m in matrices])),
        fn=float(np.mean([m.fn for m in matrices])),
        tn=float(np.mean([m.tn for m in matrices])))
    return EvalReport(
        n_runs=n_runs,
        mean_accuracy=float(np.mean(per_run["accuracy"])),
        std_accuracy=float(np.std(per_run["accuracy"])),
        mean_precision=float(np.mean(per_run["precision"])),
        std_precision=float(np.std(per_run["precision"])),
        mean_recall=float(np.mean(per_run["recall"])),
        std_recall=float(np.std(per_run["recall"])),
        mean_f1=float(np.mean(per_run["f1"])),
        std_f1=float(np.std(per_run["f1"])),
        mean_confusion=mean_cm)


def format_report_table(reports: dict[str, EvalReport]) -> str:
    """Aligned text table, one row per dataset name."""
    header = f"{'Dataset':<24}{'Accuracy':>10}{'F1':>10}" \
             f"{'Precision':>12}{'Recall':>10}"
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        lines.append(f"{name:<24}{rep.mean_accuracy:>10.3f}"
                     f"{rep.mean_f1:>10.3f}{rep.mean_precision:>12.3f}"
                     f"{rep.mean_recall:>10.3f}")
    return "\n".join(lines)


def snr(img: CScanImage) -> float:
    """Peak inside the defect footprint over mean background level."""
    if img.defect_mask is None:
        raise ValueError("snr requires a defect mask")
    mask = img.defect_mask
    if not mask.any():
        raise ValueError("snr requires a non-empty defect mask")
    if mask.all():
        raise ValueError("snr requires background pixels outside the mask")
    pixels = np.asarray(img.pixels, dtype=np.float64)
    inside_peak = pixels[mask].max()
    outside_mean = pixels[~mask].mean()
    if outside_mean == 0.0:
        return float("inf")
    return float(inside_peak / outside_mean)
