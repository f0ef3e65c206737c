"""Failure-risk assessment from uncertainty maps.

Voxels are labelled safe when their reconstruction error falls below a
fixed cut; the uncertainty map then acts as a classifier score (safe iff
uncertainty < threshold, i.e. the positive class is "safe"). The ROC is
exact: every distinct uncertainty value is a threshold. The operating
threshold maximizes F1 of the safe class, breaking ties toward the lower
threshold so the warning mask stays conservative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class RiskLabeling:
    safe: np.ndarray            # per-voxel bool
    rmse_threshold: float


@dataclass
class RocCurve:
    thresholds: np.ndarray      # descending
    tpr: np.ndarray
    fpr: np.ndarray
    precision: np.ndarray
    f1: np.ndarray
    auc: float

    def to_csv(self) -> str:
        lines = ["threshold,tpr,fpr,precision,f1"]
        for i in range(len(self.thresholds)):
            lines.append("%.9g,%.9g,%.9g,%.9g,%.9g" % (
                self.thresholds[i], self.tpr[i], self.fpr[i],
                self.precision[i], self.f1[i]))
        return "\n".join(lines) + "\n"


def error_map(pred: np.ndarray, truth: np.ndarray, samples=None) -> np.ndarray:
    """Per-voxel error of a (possibly multi-channel) map: channel-RMS of
    the difference, or RMS over MC samples when `samples` is given."""
    if pred.shape != truth.shape:
        raise DimensionError(f"misaligned volumes {pred.shape} vs {truth.shape}")
    if samples is not None:
        d = np.asarray(samples, np.float64) - truth[None]
        return np.sqrt((d * d).mean(axis=(0, -1)))
    d = pred.astype(np.float64) - truth
    return np.sqrt((d * d).mean(axis=-1))


def label_safe(err: np.ndarray, rmse_threshold: float) -> RiskLabeling:
    return RiskLabeling(safe=err < rmse_threshold, rmse_threshold=rmse_threshold)


def roc_curve(uncertainty: np.ndarray, labels: RiskLabeling,
              mask: np.ndarray | None = None) -> RocCurve:
    """Exact ROC of safe-vs-risky classification by uncertainty threshold."""
    u = np.asarray(uncertainty, np.float64)
    safe = labels.safe
    if mask is not None:
        u, safe = u[mask], safe[mask]
    u, safe = u.reshape(-1), safe.reshape(-1)
    P = int(safe.sum())
    N = int(safe.size - P)
    if P == 0 or N == 0:
        raise ContractError("ROC needs at least one voxel of each class")

    order = np.argsort(u, kind="stable")
    u_sorted = u[order]
    safe_sorted = safe[order]
    # cumulative class counts strictly below each candidate threshold
    distinct, first_idx = np.unique(u_sorted, return_index=True)
    cum_safe = np.concatenate([[0], np.cumsum(safe_sorted)])
    cum_all = np.arange(safe.size + 1)

    # thresholds: above every value, between values, below every value
    cand = np.concatenate([[np.inf], distinct[::-1], [-np.inf]])
    idx = np.concatenate([[safe.size],
                          first_idx[::-1],
                          [0]])
    tp = cum_safe[idx].astype(np.float64)           # safe & (u < thr)
    fp = (cum_all[idx] - cum_safe[idx]).astype(np.float64)
    tpr = tp / P
    fpr = fp / N
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        f1 = np.where(tp > 0, 2 * precision * tpr / (precision + tpr), 0.0)
    # trapezoid over the (FPR, TPR) curve sorted ascending in FPR
    auc = float(np.trapezoid(tpr[::-1], fpr[::-1]))
    return RocCurve(thresholds=cand, tpr=tpr, fpr=fpr,
                    precision=precision, f1=f1, auc=auc)


def select_threshold_f1(curve: RocCurve) -> float:
    """Threshold with maximal F1; ties break toward the lower threshold
    (more voxels flagged risky)."""
    best = np.max(curve.f1)
    winners = np.where(curve.f1 >= best - 1e-12)[0]
    # thresholds are stored descending; the last winner is the lowest
    return float(curve.thresholds[winners[-1]])


def warning_map(uncertainty: np.ndarray, threshold: float) -> np.ndarray:
    """Risky iff uncertainty >= threshold."""
    return np.asarray(uncertainty) >= threshold


def confusion_at(curve: RocCurve, threshold: float):
    """The curve row at `threshold` (exact match expected)."""
    exact = np.where(curve.thresholds == threshold)[0]
    if exact.size:
        i = int(exact[0])
    else:
        finite = np.where(np.isfinite(curve.thresholds),
                          curve.thresholds, np.nan)
        i = int(np.nanargmin(np.abs(finite - threshold)))
    return {"threshold": float(curve.thresholds[i]), "tpr": float(curve.tpr[i]),
            "fpr": float(curve.fpr[i]), "precision": float(curve.precision[i]),
            "f1": float(curve.f1[i])}


def mann_whitney_auc(uncertainty: np.ndarray, safe: np.ndarray) -> float:
    """AUC as the Mann-Whitney U statistic: P(u_safe < u_risky) + ties/2."""
    u = np.asarray(uncertainty, np.float64).reshape(-1)
    s = np.asarray(safe, bool).reshape(-1)
    us, ur = u[s], u[~s]
    if us.size == 0 or ur.size == 0:
        raise ContractError("need both classes")
    order = np.argsort(np.concatenate([us, ur]), kind="stable")
    ranks = np.empty(order.size, np.float64)
    combined = np.concatenate([us, ur])[order]
    # average ranks for ties
    i = 0
    pos = 1.0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and combined[j + 1] == combined[i]:
            j += 1
        avg = (pos + pos + (j - i)) / 2.0
        ranks[i:j + 1] = avg
        pos += j - i + 1
        i = j + 1
    rank_of = np.empty(order.size, np.float64)
    rank_of[order] = ranks
    r_safe = rank_of[:us.size].sum()
    u_stat = r_safe - us.size * (us.size + 1) / 2.0
    return 1.0 - u_stat / (us.size * ur.size)


def spearman_rho(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(x.size, np.float64)
        xs = x[order]
        i, pos = 0, 1.0
        while i < x.size:
            j = i
            while j + 1 < x.size and xs[j + 1] == xs[i]:
                j += 1
            r[order[i:j + 1]] = (2 * pos + (j - i)) / 2.0
            pos += j - i + 1
            i = j + 1
        return r
    ra, rb = ranks(np.asarray(a, np.float64).reshape(-1)), ranks(
        np.asarray(b, np.float64).reshape(-1))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)
