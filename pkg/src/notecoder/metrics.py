"""Multi-label confusion counts, micro/macro F1, and threshold tuning."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError

DEFAULT_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


def confusion(decisions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-label counts as an array of shape (K, 4): tp, fp, fn, tn."""
    d = np.asarray(decisions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if d.shape != y.shape or d.ndim != 2:
        raise ShapeError(f"decisions {d.shape} and labels {y.shape} must be equal N x K")
    tp = (d & y).sum(axis=0)
    fp = (d & ~y).sum(axis=0)
    fn = (~d & y).sum(axis=0)
    tn = (~d & ~y).sum(axis=0)
    return np.stack([tp, fp, fn, tn], axis=1).astype(np.int64)


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2.0 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def precision_recall_f1(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    return p, r, _f1(tp, fp, fn)


def micro_f1(counts: np.ndarray, empty: str = "zero") -> float:
    """F1 of the counts pooled across labels.

    ``empty`` controls the degenerate all-zero case: "zero" returns 0.0,
    "strict" raises UndefinedMetricError.
    """
    counts = np.asarray(counts)
    tp, fp, fn = counts[:, 0].sum(), counts[:, 1].sum(), counts[:, 2].sum()
    if tp + fp + fn == 0:
        if empty == "strict":
            raise UndefinedMetricError("micro F1 undefined: no positives or predictions")
        return 0.0
    return _f1(tp, fp, fn)


def macro_f1(counts: np.ndarray, empty: str = "skip") -> float:
    """Mean of per-label F1.

    Labels with tp = fp = fn = 0 have no defined F1; policy "skip" drops
    them, "one" scores them 1.0, "strict" raises.  If skipping leaves no
    labels at all the metric is undefined and raises.
    """
    if empty not in ("skip", "one", "strict"):
        raise ConfigError(f"unknown empty-label policy: {empty}")
    values = []
    for tp, fp, fn, _ in np.asarray(counts):
        if tp + fp + fn == 0:
            if empty == "strict":
                raise UndefinedMetricError("macro F1 undefined for an empty label")
            if empty == "one":
                values.append(1.0)
            continue
        values.append(_f1(tp, fp, fn))
    if not values:
        raise UndefinedMetricError("macro F1 undefined: every label is empty")
    return float(np.mean(values))


def tune_thresholds(
    scores: np.ndarray,
    labels: np.ndarray,
    grid: tuple[float, ...] = DEFAULT_GRID,
) -> np.ndarray:
    """Per-label threshold maximizing that label's F1; ties pick the smallest.

    Scores and labels are N x K; the grid must lie inside (0, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 2:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal N x K")
    if not grid or not all(0.0 < t < 1.0 for t in grid):
        raise ConfigError("threshold grid must be non-empty and inside (0, 1)")
    ordered = sorted(grid)
    k = s.shape[1]
    best = np.full(k, ordered[0], dtype=np.float64)
    best_f1 = np.full(k, -1.0)
    for t in ordered:
        d = s >= t
        tp = (d & y).sum(axis=0)
        fp = (d & ~y).sum(axis=0)
        fn = (~d & y).sum(axis=0)
        denom = 2.0 * tp + fp + fn
        f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
        improved = f1 > best_f1 + 1e-15
        best[improved] = t
        best_f1[improved] = f1[improved]
    return best


def metrics_report(
    counts: np.ndarray,
    thresholds: np.ndarray | None = None,
    label_names: list[str] | None = None,
) -> dict:
    """JSON-ready report: per-label and pooled counts with P/R/F1."""
    counts = np.asarray(counts)
    per_label = []
    for i, (tp, fp, fn, tn) in enumerate(counts):
        p, r, f1 = precision_recall_f1(tp, fp, fn)
        entry = {
            "label": label_names[i] if label_names else str(i),
            "tp": int(tp),
            "fp": int(fp),
            "fn": int(fn),
            "tn": int(tn),
            "precision": p,
            "recall": r,
            "f1": f1,
        }
        per_label.append(entry)
    tp, fp, fn = counts[:, 0].sum(), counts[:, 1].sum(), counts[:, 2].sum()
    p, r, f1 = precision_recall_f1(tp, fp, fn)
    report = {
        "labels": per_label,
        "micro": {"precision": p, "recall": r, "f1": f1},
        "macro": {"f1": macro_f1(counts) if counts[:, :3].sum() else 0.0},
    }
    if thresholds is not None:
        report["thresholds"] = [float(t) for t in thresholds]
    return report
