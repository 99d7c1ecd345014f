"""Confusion counts, pair-wise sensitivity/precision matrices and fold aggregation.

Conventions: ``counts[t, p]`` is the number of samples of true class ``t``
predicted as ``p``. The pair-wise sensitivity matrix is ``counts`` divided by
row (true-class) totals; the pair-wise precision matrix is ``counts`` divided
by column (predicted-class) totals.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import atomic_write_text
from .phantom_synth import CLASSES, PolypClass

N_CLASSES = len(CLASSES)


def _as_class(label) -> PolypClass:
    if isinstance(label, PolypClass):
        return label
    if isinstance(label, (int, np.integer)) and 0 <= int(label) < N_CLASSES:
        return CLASSES[int(label)]
    try:
        return PolypClass.parse(label)
    except (ValueError, TypeError):
        raise ValueError(f"label {label!r} is not one of T1..T4") from None


def confusion_counts(y_true, y_pred) -> np.ndarray:
    y_true, y_pred = list(y_true), list(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted labels")
    if not y_true:
        raise ValueError("no labels given")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        counts[_as_class(t).index, _as_class(p).index] += 1
    return counts


def pairwise_matrices(counts) -> tuple[np.ndarray, np.ndarray, dict]:
    """Row-normalised (sensitivity) and column-normalised (precision) matrices.

    Rows or columns with a zero total come out as zeros and are listed in the
    returned flags under ``zero_true`` / ``zero_pred``.
    """
    counts = np.asarray(counts)
    if counts.shape != (N_CLASSES, N_CLASSES) or (counts < 0).any():
        raise ValueError("counts must be a non-negative 4x4 matrix")
    counts = counts.astype(np.float64)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    sens = np.divide(counts, rows[:, None], out=np.zeros_like(counts), where=rows[:, None] > 0)
    prec = np.divide(counts, cols[None, :], out=np.zeros_like(counts), where=cols[None, :] > 0)
    flags = {
        "zero_true": [CLASSES[i].name for i in np.flatnonzero(rows == 0)],
        "zero_pred": [CLASSES[i].name for i in np.flatnonzero(cols == 0)],
    }
    return sens, prec, flags


def summary_metrics(counts) -> tuple[float, float, float]:
    """Accuracy, macro sensitivity and macro precision."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts).astype(np.float64)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    recall = diag[rows > 0] / rows[rows > 0]
    precision = diag[cols > 0] / cols[cols > 0]
    return float(diag.sum() / total), float(recall.mean()), float(precision.mean())


def _matrix(m) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(m)]


@dataclass(eq=False)
class EvalReport:
    accuracy: float
    sensitivity: float
    precision: float
    sensitivity_matrix: np.ndarray
    precision_matrix: np.ndarray
    counts: np.ndarray
    n_samples: int
    val_accuracy: float | None = None
    flags: dict = field(default_factory=dict)
    # fold aggregates only
    n_folds: int = 1
    mean_sensitivity_matrix: np.ndarray | None = None
    mean_precision_matrix: np.ndarray | None = None

    @classmethod
    def from_counts(cls, counts, val_accuracy: float | None = None) -> "EvalReport":
        counts = np.asarray(counts, dtype=np.int64)
        a, s, p = summary_metrics(counts)
        sens, prec, flags = pairwise_matrices(counts)
        return cls(a, s, p, sens, prec, counts, int(counts.sum()), val_accuracy, flags)

    @classmethod
    def from_labels(cls, y_true, y_pred, val_accuracy: float | None = None) -> "EvalReport":
        return cls.from_counts(confusion_counts(y_true, y_pred), val_accuracy)

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "precision": self.precision,
            "val_accuracy": self.val_accuracy,
            "n_samples": self.n_samples,
            "n_folds": self.n_folds,
            "classes": [c.name for c in CLASSES],
            "counts": [[int(v) for v in row] for row in self.counts],
            "sensitivity_matrix": _matrix(self.sensitivity_matrix),
            "precision_matrix": _matrix(self.precision_matrix),
            "flags": {k: list(v) for k, v in sorted(self.flags.items())},
        }
        if self.mean_sensitivity_matrix is not None:
            d["mean_sensitivity_matrix"] = _matrix(self.mean_sensitivity_matrix)
            d["mean_precision_matrix"] = _matrix(self.mean_precision_matrix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        mean_s = d.get("mean_sensitivity_matrix")
        mean_p = d.get("mean_precision_matrix")
        return cls(
            accuracy=float(d["accuracy"]),
            sensitivity=float(d["sensitivity"]),
            precision=float(d["precision"]),
            sensitivity_matrix=np.array(d["sensitivity_matrix"], dtype=np.float64),
            precision_matrix=np.array(d["precision_matrix"], dtype=np.float64),
            counts=np.array(d["counts"], dtype=np.int64),
            n_samples=int(d["n_samples"]),
            val_accuracy=None if d.get("val_accuracy") is None else float(d["val_accuracy"]),
            flags={k: list(v) for k, v in d.get("flags", {}).items()},
            n_folds=int(d.get("n_folds", 1)),
            mean_sensitivity_matrix=None if mean_s is None else np.array(mean_s, dtype=np.float64),
            mean_precision_matrix=None if mean_p is None else np.array(mean_p, dtype=np.float64),
        )

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass
class FoldAggregate:
    report: EvalReport
    per_fold: list[dict]


def aggregate_folds(reports, fold_ids=None) -> FoldAggregate:
    """Average scalar metrics over folds.

    Two matrix aggregates are produced: ``sensitivity_matrix`` /
    ``precision_matrix`` renormalise the summed counts (pooled), while
    ``mean_*_matrix`` average the per-fold matrices.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no fold reports to aggregate")
    fold_ids = list(range(len(reports))) if fold_ids is None else list(fold_ids)
    if len(fold_ids) != len(reports):
        raise ValueError("one fold id per report expected")
    for r in reports:
        if np.asarray(r.counts).shape != (N_CLASSES, N_CLASSES):
            raise ValueError("fold reports have inconsistent class sets")
    pooled = np.sum([r.counts for r in reports], axis=0).astype(np.int64)
    sens, prec, flags = pairwise_matrices(pooled)
    vals = [r.val_accuracy for r in reports if r.val_accuracy is not None]
    if vals and len(vals) != len(reports):
        raise ValueError("validation accuracy present for some folds only")
    agg = EvalReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        sensitivity=float(np.mean([r.sensitivity for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        sensitivity_matrix=sens,
        precision_matrix=prec,
        counts=pooled,
        n_samples=int(pooled.sum()),
        val_accuracy=float(np.mean(vals)) if vals else None,
        flags=flags,
        n_folds=len(reports),
        mean_sensitivity_matrix=np.mean([r.sensitivity_matrix for r in reports], axis=0),
        mean_precision_matrix=np.mean([r.precision_matrix for r in reports], axis=0),
    )
    per_fold = [
        {"fold": int(i), "n_samples": r.n_samples, "val_accuracy": r.val_accuracy,
         "accuracy": r.accuracy, "sensitivity": r.sensitivity, "precision": r.precision}
        for i, r in zip(fold_ids, reports)
    ]
    return FoldAggregate(agg, per_fold)


# --------------------------------------------------------------------------
# rendering

TABLE_ROWS = (
    ("Validation Acc.", "val_accuracy"),
    ("Test Acc.", "accuracy"),
    ("Sensitivity", "sensitivity"),
    ("Precision", "precision"),
)

DISPLAY_NAMES = {
    "svm": "SVM",
    "resnet_scratch": "ResNet-18 (scratch)",
    "resnet_pretrained": "ResNet-18 (pretrained)",
}


def format_percent(value: float | None) -> str:
    return "N/A" if value is None else f"{100.0 * value:.2f}%"


def render_table(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(reports)
    w.writerow(["metric"] + [DISPLAY_NAMES.get(n, n) for n in names])
    for label, attr in TABLE_ROWS:
        w.writerow([label] + [format_percent(getattr(reports[n], attr)) for n in names])
    return buf.getvalue()


def heatmap_annotations(matrix) -> list[list[str]]:
    return [[f"{v:.2f}" for v in row] for row in np.asarray(matrix)]


def _heatmap(matrix, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [c.name for c in CLASSES]
    fig, ax = plt.subplots(figsize=(4.2, 3.8), dpi=100)
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="Blues")
    for i, row in enumerate(heatmap_annotations(matrix)):
        for j, text in enumerate(row):
            ax.text(j, i, text, ha="center", va="center",
                    color="white" if matrix[i][j] > 0.5 else "black", fontsize=9)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def metrics_document(aggregates: dict[str, FoldAggregate]) -> dict:
    return {
        name: {"aggregate": agg.report.to_dict(), "per_fold": agg.per_fold}
        for name, agg in aggregates.items()
    }


def write_metrics(aggregates: dict[str, FoldAggregate], path) -> None:
    """Byte-stable JSON: sorted keys, no timestamps."""
    atomic_write_text(path, json.dumps(metrics_document(aggregates), indent=1, sort_keys=True) + "\n")


def render_report(aggregates, out_dir) -> list[Path]:
    """Write metrics.json, table.csv and sensitivity/precision heatmaps per classifier.

    ``aggregates`` maps classifier name to a :class:`FoldAggregate` (or a bare
    :class:`EvalReport`, treated as a single fold).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggs = {n: a if isinstance(a, FoldAggregate) else FoldAggregate(a, []) for n, a in aggregates.items()}
    written = []
    p = out_dir / "metrics.json"
    write_metrics(aggs, p)
    written.append(p)
    p = out_dir / "table.csv"
    atomic_write_text(p, render_table({n: a.report for n, a in aggs.items()}))
    written.append(p)
    for name, agg in aggs.items():
        shown = DISPLAY_NAMES.get(name, name)
        for kind, matrix in (("sensitivity", agg.report.sensitivity_matrix),
                             ("precision", agg.report.precision_matrix)):
            p = out_dir / f"{name}_{kind}.png"
            _heatmap(matrix, f"{shown}: pair-wise {kind}", p)
            written.append(p)
    return written


def load_metrics(path) -> dict[str, FoldAggregate]:
    """Inverse of :func:`write_metrics`; known classifiers come back in table order."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    known = list(DISPLAY_NAMES)
    names = sorted(doc, key=lambda n: (known.index(n) if n in known else len(known), n))
    return {n: FoldAggregate(EvalReport.from_dict(doc[n]["aggregate"]), doc[n]["per_fold"]) for n in names}
