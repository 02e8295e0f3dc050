"""Ensemble posteriors, MCA / recall / F-score, cross-scale correlations.

Accuracies are reported in percent. The per-class accuracy ``CA[k]`` is the
per-class precision, so MCA is the mean precision; recall is reported next to it.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PredictionRecord:
    image_id: str
    label: int
    posteriors: dict  # scale -> length-K vector

    @property
    def num_classes(self) -> int:
        return len(next(iter(self.posteriors.values())))


@dataclass
class MetricsReport:
    scales: tuple
    class_accuracy: np.ndarray  # per-class precision, percent
    class_recall: np.ndarray    # percent
    confusion: np.ndarray       # rows: true class, columns: predicted class
    mca: float
    mean_recall: float
    f_score: float
    best_in_block: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.class_accuracy)


def f_score(mca: float, mean_recall: float) -> float:
    """Harmonic mean of mean precision (MCA) and mean recall."""
    if mca + mean_recall == 0:
        return 0.0
    return 2.0 * mca * mean_recall / (mca + mean_recall)


def ensemble_posterior(record: PredictionRecord, scales) -> np.ndarray:
    """Unweighted mean of the record's posteriors over ``scales``."""
    scales = list(scales)
    if not scales:
        raise ValueError("scale subset must be non-empty")
    for s in scales:
        if s not in record.posteriors:
            raise KeyError(f"record {record.image_id} has no posterior for scale {s}")
    return np.mean([np.asarray(record.posteriors[s], dtype=np.float64) for s in scales], axis=0)


def classify(posterior) -> int:
    """Arg-max; ties go to the lowest class index."""
    return int(np.argmax(np.asarray(posterior)))


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def per_class_precision(cm: np.ndarray) -> np.ndarray:
    predicted = cm.sum(axis=0)
    correct = np.diag(cm)
    # a class that is never predicted scores 0
    return np.where(predicted > 0, 100.0 * correct / np.maximum(predicted, 1), 0.0)


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    actual = cm.sum(axis=1)
    return np.where(actual > 0, 100.0 * np.diag(cm) / np.maximum(actual, 1), 0.0)


def mean_class_accuracy(labels, predictions, num_classes: int) -> float:
    return float(per_class_precision(confusion_matrix(labels, predictions, num_classes)).mean())


def metrics_from_confusion(cm: np.ndarray, scales=()) -> MetricsReport:
    ca = per_class_precision(cm)
    rec = per_class_recall(cm)
    mca, mr = float(ca.mean()), float(rec.mean())
    return MetricsReport(tuple(scales), ca, rec, cm, mca, mr, f_score(mca, mr))


def compute_metrics(records: list[PredictionRecord], scales) -> MetricsReport:
    if not records:
        raise ValueError("no prediction records")
    scales = tuple(scales)
    k = records[0].num_classes
    labels = np.array([r.label for r in records])
    preds = np.array([classify(ensemble_posterior(r, scales)) for r in records])
    cm = confusion_matrix(labels, preds, k)
    absent = np.flatnonzero(cm.sum(axis=1) == 0)
    if absent.size:
        raise ValueError(f"classes without test records: {absent.tolist()}")
    return metrics_from_confusion(cm, scales)


def all_subsets(scales) -> list[tuple]:
    scales = sorted(scales)
    return [c for r in range(1, len(scales) + 1) for c in itertools.combinations(scales, r)]


def evaluate_all_subsets(records, scales) -> list[MetricsReport]:
    """Metrics for every non-empty scale subset, by size then lexicographic order.

    Within each size block the report(s) with the highest MCA get ``best_in_block``.
    """
    if not scales:
        raise ValueError("need at least one scale")
    reports = [compute_metrics(records, subset) for subset in all_subsets(scales)]
    for size in {len(r.scales) for r in reports}:
        block = [r for r in reports if len(r.scales) == size]
        top = max(r.mca for r in block)
        for r in block:
            r.best_in_block = r.mca == top
    return reports


def per_scale_class_accuracy(records, scales) -> np.ndarray:
    """K x S matrix of CA (precision, percent) of each single scale."""
    return np.stack([compute_metrics(records, (s,)).class_accuracy for s in scales], axis=1)


def pearson(a, b) -> float:
    """Pearson correlation; NaN when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def correlation_matrix(ca: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation between the columns of a K x S CA matrix."""
    s = ca.shape[1]
    out = np.eye(s)
    for i in range(s):
        for j in range(i + 1, s):
            out[i, j] = out[j, i] = pearson(ca[:, i], ca[:, j])
    return out


def scale_correlations(records, scales) -> np.ndarray:
    """S x S correlations of per-class CA between scales (NaN where undefined)."""
    scales = list(scales)
    ca = per_scale_class_accuracy(records, scales)
    if ca.shape[0] < 2:
        raise ValueError("need at least two classes to correlate class accuracies")
    return correlation_matrix(ca)


def adjacent_vs_extreme(corr: np.ndarray) -> tuple[float, float]:
    """(mean correlation of neighbouring scales, correlation of the two extreme scales)."""
    s = corr.shape[0]
    adjacent = [corr[i, i + 1] for i in range(s - 1)]
    return float(np.nanmean(adjacent)), float(corr[0, s - 1])


def mean_off_diagonal(corr: np.ndarray) -> float:
    iu = np.triu_indices(corr.shape[0], k=1)
    return float(np.nanmean(corr[iu]))


@dataclass
class VariationRow:
    label: int
    std: float
    class_accuracy: np.ndarray


def scale_variation_ranking(records, scales, top_n: int = 5):
    """Classes with the least and most spread (population std) of CA over scales.

    Returns ``(least, most)``; ``most`` is ordered from the largest spread down.
    """
    ca = per_scale_class_accuracy(records, list(scales))
    std = ca.std(axis=1)
    order = np.argsort(std, kind="stable")
    rows = [VariationRow(int(k), float(std[k]), ca[k]) for k in order]
    n = min(top_n, len(rows))
    least = rows[:n]
    most = sorted(rows, key=lambda r: -r.std)[:n]
    return least, most


# -- prediction vectors -------------------------------------------------------

def export_prediction_vectors(records, scales, path) -> None:
    """CSV of ensemble posteriors over ``scales``: image_id, label, p0..p{K-1}."""
    scales = tuple(scales)
    k = records[0].num_classes if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label"] + [f"p{i}" for i in range(k)])
        for r in records:
            post = ensemble_posterior(r, scales)
            w.writerow([r.image_id, r.label] + [repr(float(p)) for p in post])


def import_prediction_vectors(path, key="ensemble") -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [PredictionRecord(row[0], int(row[1]), {key: np.array([float(v) for v in row[2:]])})
                for row in reader]


def write_records(records, scales, path) -> None:
    """Per-scale posteriors, one row per (image, scale)."""
    k = records[0].num_classes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "scale"] + [f"p{i}" for i in range(k)])
        for r in records:
            for s in scales:
                w.writerow([r.image_id, r.label, s] + [repr(float(p)) for p in r.posteriors[s]])


def read_records(path) -> list[PredictionRecord]:
    out: dict[str, PredictionRecord] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rec = out.setdefault(row[0], PredictionRecord(row[0], int(row[1]), {}))
            rec.posteriors[int(row[2])] = np.array([float(v) for v in row[3:]])
    return list(out.values())


# -- report writers -----------------------------------------------------------

def subset_table_text(reports: list[MetricsReport], scales) -> str:
    scales = sorted(scales)
    head = " ".join(f"{s:>5}" for s in scales) + " |    MCA  Mean recall  F-Score"
    lines = [head, "-" * len(head)]
    size = None
    for r in reports:
        if size is not None and len(r.scales) != size:
            lines.append("-" * len(head))
        size = len(r.scales)
        marks = " ".join(f"{'+' if s in r.scales else '':>5}" for s in scales)
        star = " *" if r.best_in_block and len(reports) > 1 else ""
        lines.append(f"{marks} | {r.mca:6.2f}  {r.mean_recall:11.2f}  {r.f_score:7.2f}{star}")
    return "\n".join(lines) + "\n"


def write_subset_csv(reports, scales, path) -> None:
    scales = sorted(scales)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([str(s) for s in scales] + ["mca", "mean_recall", "f_score", "best_in_block"])
        for r in reports:
            w.writerow(["+" if s in r.scales else "" for s in scales]
                       + [f"{r.mca:.2f}", f"{r.mean_recall:.2f}", f"{r.f_score:.2f}",
                          int(r.best_in_block)])


def correlation_text(corr: np.ndarray, scales) -> str:
    lines = ["      " + "".join(f"{s:>8}" for s in scales)]
    for s, row in zip(scales, corr):
        cells = "".join("     n/a" if np.isnan(v) else f"{v:8.2f}" for v in row)
        lines.append(f"{s:>6}{cells}")
    return "\n".join(lines) + "\n"


def write_correlation_csv(corr: np.ndarray, scales, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale"] + [str(s) for s in scales])
        for s, row in zip(scales, corr):
            w.writerow([s] + ["" if np.isnan(v) else f"{v:.6f}" for v in row])


def variation_text(least, most, scales, names=None) -> str:
    def name(k):
        return names[k] if names else f"class {k}"
    out = []
    for title, rows in (("least variation between scales", least),
                        ("most variation between scales", most)):
        out.append(title)
        out.append(f"{'class':<16}" + "".join(f"{s:>8}" for s in scales) + "     std")
        for r in rows:
            out.append(f"{name(r.label):<16}" + "".join(f"{v:8.2f}" for v in r.class_accuracy)
                       + f"{r.std:8.2f}")
        out.append("")
    return "\n".join(out)
