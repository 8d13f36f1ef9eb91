"""Multi-label evaluation metrics: micro/macro F1, micro/macro AUC, P@N."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from tracecoder.errors import ValidationError


@dataclass
class EvalBatch:
    scores: np.ndarray  # (n_docs, L) in [0, 1]
    gold: np.ndarray  # (n_docs, L) binary
    threshold: float | np.ndarray = 0.5

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.gold = np.atleast_2d(np.asarray(self.gold))
        if self.scores.shape != self.gold.shape:
            raise ValidationError(f"shape mismatch: scores {self.scores.shape} vs gold {self.gold.shape}")
        if not np.isin(self.gold, (0, 1)).all():
            raise ValidationError("gold matrix must be binary")
        self.gold = self.gold.astype(bool)

    @property
    def predicted(self) -> np.ndarray:
        return self.scores >= self.threshold


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def _confusion(batch: EvalBatch, axis=None):
    pred, gold = batch.predicted, batch.gold
    tp = (pred & gold).sum(axis=axis)
    fp = (pred & ~gold).sum(axis=axis)
    fn = (~pred & gold).sum(axis=axis)
    return tp, fp, fn


def micro_f1(batch: EvalBatch) -> float:
    return float(_f1(*_confusion(batch)))


def macro_f1(batch: EvalBatch) -> float:
    """Per-label F1 (0/0 → 0) averaged over every label in the label space."""
    return float(np.mean(_f1(*_confusion(batch, axis=0))))


def _auc(scores: np.ndarray, gold: np.ndarray) -> float | None:
    n_pos = int(gold.sum())
    n_neg = gold.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks: ties count one half
    return float((ranks[gold].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def micro_auc(batch: EvalBatch) -> float | None:
    return _auc(batch.scores.ravel(), batch.gold.ravel())


def macro_auc_details(batch: EvalBatch) -> tuple[float | None, int]:
    """Mean per-label AUC over labels with both classes, and the excluded count."""
    aucs = [_auc(batch.scores[:, j], batch.gold[:, j]) for j in range(batch.scores.shape[1])]
    kept = [a for a in aucs if a is not None]
    excluded = len(aucs) - len(kept)
    return (float(np.mean(kept)) if kept else None), excluded


def macro_auc(batch: EvalBatch) -> float | None:
    return macro_auc_details(batch)[0]


def precision_at_n(batch: EvalBatch, n: int) -> float:
    L = batch.scores.shape[1]
    if n < 1:
        raise ValidationError("N must be >= 1")
    if n > L:
        raise ValidationError(f"N={n} exceeds the label-space size {L}")
    # stable sort on negated scores: equal scores keep lower label index first
    top = np.argsort(-batch.scores, axis=1, kind="stable")[:, :n]
    hits = np.take_along_axis(batch.gold, top, axis=1).sum(axis=1)
    return float(np.mean(hits / n))


def all_metrics(batch: EvalBatch, ns: Sequence[int] = (5, 8, 15)) -> dict:
    mauc, excluded = macro_auc_details(batch)
    out = {
        "micro_f1": micro_f1(batch),
        "macro_f1": macro_f1(batch),
        "micro_auc": micro_auc(batch),
        "macro_auc": mauc,
        "excluded_label_count": excluded,
    }
    for n in ns:
        out[f"p_at_{n}"] = precision_at_n(batch, n)
    return out


DEFAULT_GRID = tuple(round(0.05 + 0.01 * i, 2) for i in range(91))


def optimize_threshold(dev_scores, dev_labels, grid: Sequence[float] = DEFAULT_GRID) -> float:
    """Grid value maximizing dev micro-F1; the smallest wins ties."""
    if not len(grid):
        raise ValidationError("threshold grid is empty")
    if any(not 0 < g < 1 for g in grid):
        raise ValidationError("threshold grid values must lie in (0, 1)")
    best_t, best_f = None, -1.0
    for t in sorted(grid):
        f = micro_f1(EvalBatch(dev_scores, dev_labels, t))
        if f > best_f:
            best_t, best_f = t, f
    return float(best_t)


def optimize_threshold_per_label(dev_scores, dev_labels,
                                 grid: Sequence[float] = DEFAULT_GRID) -> np.ndarray:
    scores = np.atleast_2d(np.asarray(dev_scores, dtype=np.float64))
    gold = np.atleast_2d(np.asarray(dev_labels))
    return np.array([optimize_threshold(scores[:, [j]], gold[:, [j]], grid)
                     for j in range(scores.shape[1])])
