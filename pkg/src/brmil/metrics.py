"""Binary classification metrics on probabilities."""

from __future__ import annotations

import math

import numpy as np

NAMES = ("pr_auc", "f1_05", "acc", "prec", "rec", "spec", "npv", "f1_best")


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision).

    Tied scores are handled as one threshold step. NaN for single-class input.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    npos = int(y.sum())
    if npos == 0 or npos == len(y):
        return math.nan
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp, fp = tp[last], fp[last]
    prec = tp / (tp + fp)
    rec = tp / npos
    drec = np.diff(np.r_[0.0, rec])
    return float((drec * prec).sum())


def _safe(num, den) -> float:
    return float(num / den) if den else math.nan


def confusion(pred, labels, thr: float = 0.5) -> dict:
    p = np.asarray(pred) >= thr
    y = np.asarray(labels).astype(bool)
    return {"tp": int((p & y).sum()), "fp": int((p & ~y).sum()),
            "tn": int((~p & ~y).sum()), "fn": int((~p & y).sum())}


def f1_at(pred, labels, thr: float) -> float:
    c = confusion(pred, labels, thr)
    return _safe(2 * c["tp"], 2 * c["tp"] + c["fp"] + c["fn"])


def best_threshold(pred, labels) -> tuple:
    """Threshold maximizing F1 (lowest such threshold on ties) and that F1."""
    best = (0.5, -1.0)
    for t in np.unique(np.asarray(pred, dtype=np.float64)):
        f = f1_at(pred, labels, t)
        if not math.isnan(f) and f > best[1]:
            best = (float(t), f)
    return best if best[1] >= 0 else (0.5, math.nan)


def metrics(pred, labels, threshold: float | None = None) -> dict:
    """All reported metrics. ``threshold`` is a validation-chosen cutoff for F1_best;
    without one, the best threshold on this data is used."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels)
    if len(pred) == 0:
        raise ValueError("metrics: empty prediction list")
    c = confusion(pred, labels, 0.5)
    out = {
        "pr_auc": pr_auc(pred, labels),
        "f1_05": _safe(2 * c["tp"], 2 * c["tp"] + c["fp"] + c["fn"]),
        "acc": (c["tp"] + c["tn"]) / len(pred),
        "prec": _safe(c["tp"], c["tp"] + c["fp"]),
        "rec": _safe(c["tp"], c["tp"] + c["fn"]),
        "spec": _safe(c["tn"], c["tn"] + c["fp"]),
        "npv": _safe(c["tn"], c["tn"] + c["fn"]),
    }
    if threshold is None:
        out["f1_best"] = best_threshold(pred, labels)[1]
    else:
        out["f1_best"] = f1_at(pred, labels, threshold)
    out["single_class"] = bool(math.isnan(out["pr_auc"]))
    return out
