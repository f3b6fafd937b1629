"""Classification and regression metrics.

AUC uses the Mann-Whitney rank formulation ((concordant + 0.5*ties) / (P*N)).
Threshold selection picks the largest score threshold whose sensitivity
reaches the target (predicting positive at score >= threshold); when no
threshold reaches it, the sensitivity-maximizing one is returned and
flagged. Undefined metrics surface as explicit None, never NaN.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


class UndefinedMetric(DataError):
    """Metric has no defined value for this input (e.g. single-class labels)."""


def _scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be binary")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    scores, labels = _scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks across ties
    sorted_scores = scores[order]
    start = 0
    for i in range(1, len(scores) + 1):
        if i == len(scores) or sorted_scores[i] != sorted_scores[start]:
            if i - start > 1:
                ranks[order[start:i]] = 0.5 * (start + 1 + i)
            start = i
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(probs: np.ndarray, labels: np.ndarray) -> tuple[float, list[float | None]]:
    """One-vs-rest AUC per class column plus their mean over defined classes."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    per_class: list[float | None] = []
    for c in range(probs.shape[1]):
        binary = (labels == c).astype(np.int64)
        try:
            per_class.append(roc_auc(probs[:, c], binary))
        except UndefinedMetric:
            per_class.append(None)
    defined = [a for a in per_class if a is not None]
    if not defined:
        raise UndefinedMetric("no class has both positives and negatives")
    return float(np.mean(defined)), per_class


def select_threshold(scores, labels, target_sensitivity: float = 0.8):
    """(threshold, achieved) — the largest score threshold with
    sensitivity >= target; else the sensitivity-maximizing one, flagged."""
    scores, labels = _scores_labels(scores, labels)
    if labels.sum() == 0:
        raise UndefinedMetric("threshold selection needs positive samples")
    pos = scores[labels == 1]
    best_t, best_sens = None, -1.0
    for t in np.unique(scores)[::-1]:  # descending
        sens = float(np.mean(pos >= t))
        if sens >= target_sensitivity:
            return float(t), True
        if sens > best_sens:
            best_t, best_sens = float(t), sens
    return best_t, False


def confusion_metrics(scores, labels, threshold: float):
    """(sensitivity, specificity, accuracy) predicting positive at score >= threshold."""
    scores, labels = _scores_labels(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    sens = tp / n_pos if n_pos else None
    spec = tn / n_neg if n_neg else None
    acc = (tp + tn) / len(labels)
    return sens, spec, acc


def regression_metrics(y_pred, y_true):
    """(mse, mae, pearson cc, r2); cc/r2 are None when their variance vanishes."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != y_true.shape or y_pred.ndim != 1 or len(y_pred) < 2:
        raise DataError(f"need two equal-length vectors of >= 2 values, got {y_pred.shape} vs {y_true.shape}")
    err = y_pred - y_true
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else float(1.0 - np.sum(err**2) / ss_tot)
    sp = float(np.std(y_pred))
    st = float(np.std(y_true))
    if sp == 0.0 or st == 0.0:
        cc = None
    else:
        cc = float(np.mean((y_pred - y_pred.mean()) * (y_true - y_true.mean())) / (sp * st))
    return mse, mae, cc, r2


def classification_report(probs, labels, class_names, target_sensitivity=0.8) -> dict:
    """Per-class one-vs-rest AUC/threshold/confusion metrics plus macro AUC."""
    macro, per_class = macro_ovr_auc(probs, labels)
    classes = {}
    for i, name in enumerate(class_names):
        entry = {"auc": per_class[i]}
        binary = (np.asarray(labels) == i).astype(int)
        if binary.sum() and per_class[i] is not None:
            threshold, achieved = select_threshold(probs[:, i], binary, target_sensitivity)
            sens, spec, acc = confusion_metrics(probs[:, i], binary, threshold)
            entry.update(
                threshold=threshold,
                sensitivity_target_achieved=achieved,
                sensitivity=sens,
                specificity=spec,
                accuracy=acc,
            )
        else:
            entry.update(
                threshold=None,
                sensitivity_target_achieved=None,
                sensitivity=None,
                specificity=None,
                accuracy=None,
            )
        classes[name] = entry
    return {"macro_auc": macro, "classes": classes, "target_sensitivity": target_sensitivity}


def severity_report(pred_arrays, true_arrays) -> dict:
    """Array-entry-wise and global-score-wise regression metrics."""
    pred_arrays = np.asarray(pred_arrays, dtype=np.float64)
    true_arrays = np.asarray(true_arrays, dtype=np.float64)
    entry = regression_metrics(pred_arrays.reshape(-1), true_arrays.reshape(-1))
    pred_scores = pred_arrays.sum(axis=(-2, -1))
    true_scores = true_arrays.sum(axis=(-2, -1))
    glob = regression_metrics(pred_scores, true_scores)
    names = ("mse", "mae", "cc", "r2")
    return {
        "array": dict(zip(names, entry)),
        "global": dict(zip(names, glob)),
    }
