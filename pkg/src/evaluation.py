"""
Study-level evaluation: ROC staircase, full and partial AUC, recall at
precision, and aggregation across cross-validation folds.

The curve and precision sweep come from scikit-learn. Tied scores advance TP
and FP together, so every tie group is one diagonal segment of the curve;
this makes the trapezoidal AUC equal to the concordant-pair statistic with
ties counted as one half.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn import metrics

from .config import METRICS_COLUMNS, PAUC_FPR_MAX, RECALL_PRECISIONS, ROC_COLUMNS, ROC_GRID_POINTS
from .errors import MetricError

logger = logging.getLogger(__name__)

_PRECISION_TOL = 1e-12


@dataclass
class RocCurve:
    """(fpr, tpr, threshold) points from (0, 0) to (1, 1); the first threshold is +inf."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return [(float(f), float(t), float(s)) for f, t, s in zip(self.fpr, self.tpr, self.thresholds)]


@dataclass
class MeanRoc:
    """Vertically averaged TPR on a fixed FPR grid."""

    fpr: np.ndarray
    tpr: np.ndarray


@dataclass
class MetricsReport:
    fold: str
    variant: str
    norm: str
    auc: float
    partial_auc: float
    recall_at: dict[float, float]
    roc: RocCurve | None = None
    mean_roc: MeanRoc | None = None
    view: int | None = None
    skipped: int = 0
    extra: dict[str, float] = field(default_factory=dict)


# ─── Curve ──────────────────────────────────────────────────────────────────

def _validate(scores: Sequence[float], labels: Sequence[int], need_negative: bool = True) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if not y.any() or (need_negative and y.all()):
        raise MetricError("both positive and negative labels are required")
    return s, y


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Every distinct score is a cut; nothing collinear is dropped, so the staircase stays complete."""
    s, y = _validate(scores, labels)
    fpr, tpr, thresholds = metrics.roc_curve(y, s, drop_intermediate=False)
    return RocCurve(fpr=fpr.astype(np.float64), tpr=tpr.astype(np.float64), thresholds=thresholds.astype(np.float64))


def _truncate(fpr: np.ndarray, tpr: np.ndarray, fpr_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Points with FPR ≤ fpr_max, closed by the interpolated point at fpr_max when none lands on it."""
    keep = fpr <= fpr_max
    x, y = fpr[keep], tpr[keep]
    if x[-1] < fpr_max:
        j = int(np.searchsorted(fpr, fpr_max, side="right"))
        x0, x1, y0, y1 = fpr[j - 1], fpr[j], tpr[j - 1], tpr[j]
        x = np.r_[x, fpr_max]
        y = np.r_[y, y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0)]
    return x, y


def auc(curve: RocCurve) -> float:
    return float(metrics.auc(curve.fpr, curve.tpr))


def partial_auc(curve: RocCurve, fpr_max: float = PAUC_FPR_MAX) -> float:
    """Area over FPR ∈ [0, fpr_max] divided by fpr_max (range 0..1)."""
    if not 0.0 < fpr_max <= 1.0:
        raise MetricError(f"fpr_max must be in (0, 1], got {fpr_max}")
    x, y = _truncate(curve.fpr, curve.tpr, fpr_max)
    return float(metrics.auc(x, y)) / fpr_max


def recall_at_precision(scores: Sequence[float], labels: Sequence[int], p: float) -> float:
    """Largest recall over score thresholds whose precision is at least ``p``; 0 when none is."""
    if not 0.0 < p <= 1.0:
        raise MetricError(f"precision target must be in (0, 1], got {p}")
    s, y = _validate(scores, labels, need_negative=False)
    precision, recall, _ = metrics.precision_recall_curve(y, s)
    qualifying = precision >= p - _PRECISION_TOL
    return float(recall[qualifying].max()) if qualifying.any() else 0.0


# ─── Reports ────────────────────────────────────────────────────────────────

def evaluate_scores(
    scores: Sequence[float],
    labels: Sequence[int],
    fold: str,
    variant: str,
    norm: str,
    view: int | None = None,
    skipped: int = 0,
) -> MetricsReport:
    curve = roc_curve(scores, labels)
    return MetricsReport(
        fold=fold,
        variant=variant,
        norm=norm,
        auc=auc(curve),
        partial_auc=partial_auc(curve),
        recall_at={p: recall_at_precision(scores, labels, p) for p in RECALL_PRECISIONS},
        roc=curve,
        view=view,
        skipped=skipped,
    )


def tpr_on_grid(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """TPR of the staircase at each grid FPR; vertical segments report their upper end."""
    out = np.empty_like(grid)
    last = curve.fpr.size - 1
    for i, x in enumerate(grid):
        j = int(np.searchsorted(curve.fpr, x, side="right")) - 1
        if j >= last:
            out[i] = curve.tpr[last]
        else:
            x0, x1 = curve.fpr[j], curve.fpr[j + 1]
            y0, y1 = curve.tpr[j], curve.tpr[j + 1]
            out[i] = y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    return out


def mean_roc(curves: Sequence[RocCurve], points: int = ROC_GRID_POINTS) -> MeanRoc:
    grid = np.linspace(0.0, 1.0, points)
    return MeanRoc(grid, np.mean([tpr_on_grid(c, grid) for c in curves], axis=0))


def cross_fold_mean(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of every metric plus the vertically averaged ROC."""
    if not reports:
        raise MetricError("cross_fold_mean needs at least one report")
    first = reports[0]
    curves = [r.roc for r in reports if r.roc is not None]
    return MetricsReport(
        fold="mean",
        variant=first.variant,
        norm=first.norm,
        auc=float(np.mean([r.auc for r in reports])),
        partial_auc=float(np.mean([r.partial_auc for r in reports])),
        recall_at={p: float(np.mean([r.recall_at[p] for r in reports])) for p in first.recall_at},
        mean_roc=mean_roc(curves) if curves else None,
        view=first.view,
        skipped=sum(r.skipped for r in reports),
    )


# ─── CSV ────────────────────────────────────────────────────────────────────

def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, ".12g")


def metrics_row(report: MetricsReport) -> dict[str, str]:
    row = {
        "fold": report.fold,
        "variant": report.variant,
        "norm": report.norm,
        "auc": _fmt(report.auc),
        "pauc30": _fmt(report.partial_auc),
    }
    for p in RECALL_PRECISIONS:
        row[f"r_at_p{round(p * 100)}"] = _fmt(report.recall_at[p])
    return row


def write_metrics_csv(reports: Sequence[MetricsReport], path: Path) -> None:
    """Metrics table; single-view runs append ``view`` and ``skipped_studies`` columns."""
    single_view = any(r.view is not None for r in reports)
    columns = METRICS_COLUMNS + (["view", "skipped_studies"] if single_view else [])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            row = metrics_row(report)
            if single_view:
                row["view"] = "" if report.view is None else str(report.view)
                row["skipped_studies"] = str(report.skipped)
            writer.writerow(row)


def read_metrics_csv(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        raise MetricError(f"metrics file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def write_roc_csv(curve: RocCurve, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ROC_COLUMNS)
        for f, t, s in curve.points():
            writer.writerow([_fmt(f), _fmt(t), _fmt(s)])


def write_mean_roc_csv(curve: MeanRoc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ROC_COLUMNS)
        for f, t in zip(curve.fpr, curve.tpr):
            writer.writerow([_fmt(float(f)), _fmt(float(t)), ""])


def read_roc_csv(path: Path) -> RocCurve:
    if not path.exists():
        raise MetricError(f"ROC file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != ROC_COLUMNS:
            raise MetricError(f"{path}: columns must be {ROC_COLUMNS}, got {reader.fieldnames}")
        rows = list(reader)
    if len(rows) < 2:
        raise MetricError(f"{path}: ROC needs at least two points")
    curve = RocCurve(
        fpr=np.array([float(r["fpr"]) for r in rows]),
        tpr=np.array([float(r["tpr"]) for r in rows]),
        thresholds=np.array([float(r["threshold"]) if r["threshold"] else math.nan for r in rows]),
    )
    if (curve.fpr[0], curve.tpr[0]) != (0.0, 0.0) or (curve.fpr[-1], curve.tpr[-1]) != (1.0, 1.0):
        raise MetricError(f"{path}: ROC must run from (0, 0) to (1, 1)")
    return curve


@dataclass(frozen=True)
class Prediction:
    study_id: str
    patient_id: str
    label: int
    probability: float


PREDICTION_COLUMNS = ["study_id", "patient_id", "label", "probability"]


def write_predictions_csv(predictions: Sequence[Prediction], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for p in predictions:
            writer.writerow([p.study_id, p.patient_id, p.label, _fmt(p.probability)])
