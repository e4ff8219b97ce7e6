"""OOD detection metrics with ID samples as the positive class.

Tied scores are handled as blocks: every sample sharing a score is accepted or
rejected together, so results never depend on sort stability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from oodcl.errors import EmptyInput

TPR_LEVEL = 0.95


@dataclass(frozen=True)
class EvalScores:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        for name in ("id_scores", "ood_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size == 0:
                raise EmptyInput(f"{name} is empty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite values")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class MetricsReport:
    fpr_at_95: float
    auroc: float
    aupr: float
    n_id: int
    n_ood: int


def _scores(scores, ood=None) -> EvalScores:
    if isinstance(scores, EvalScores):
        return scores
    return EvalScores(scores, ood)


def _tie_blocks(s: EvalScores):
    """Cumulative (tp, fp) counts at the end of each descending tie block."""
    values = np.concatenate([s.id_scores, s.ood_scores])
    is_pos = np.concatenate([np.ones(s.id_scores.size), np.zeros(s.ood_scores.size)])
    order = np.argsort(-values, kind="stable")
    values, is_pos = values[order], is_pos[order]
    block_end = np.r_[np.nonzero(np.diff(values))[0], values.size - 1]
    tp = np.cumsum(is_pos)[block_end]
    fp = (block_end + 1) - tp
    return tp, fp


def fpr_at_95(scores, ood=None) -> float:
    """Fraction of OOD scores at or above the largest threshold keeping TPR >= 0.95."""
    s = _scores(scores, ood)
    n = s.id_scores.size
    # smallest k with k/n >= 0.95, kept in integers so the boundary is exact
    k = -(-95 * n // 100)
    threshold = np.sort(s.id_scores)[::-1][k - 1]
    return float(np.mean(s.ood_scores >= threshold))


def auroc(scores, ood=None) -> float:
    """P(id > ood) + 0.5 P(id == ood), via midranks."""
    s = _scores(scores, ood)
    n_pos, n_neg = s.id_scores.size, s.ood_scores.size
    values = np.concatenate([s.id_scores, s.ood_scores])
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    starts = np.r_[0, np.nonzero(np.diff(sorted_vals))[0] + 1]
    ends = np.r_[starts[1:], values.size]
    midranks = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(midranks, ends - starts)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, ood=None) -> float:
    """Average precision: sum over tie blocks of recall gain times block precision."""
    s = _scores(scores, ood)
    tp, fp = _tie_blocks(s)
    gained = np.diff(np.r_[0.0, tp])
    return float(np.sum(gained / s.id_scores.size * tp / (tp + fp)))


def compute_metrics(scores, ood=None) -> MetricsReport:
    s = _scores(scores, ood)
    return MetricsReport(
        fpr_at_95=fpr_at_95(s),
        auroc=auroc(s),
        aupr=aupr(s),
        n_id=s.id_scores.size,
        n_ood=s.ood_scores.size,
    )


def evaluate_sets(
    per_set: Mapping[str, EvalScores] | Sequence[tuple[str, EvalScores]],
) -> tuple[dict[str, MetricsReport], dict[str, float]]:
    """Per-set reports plus the unweighted average of each metric."""
    items = list(per_set.items()) if isinstance(per_set, Mapping) else list(per_set)
    if not items:
        raise EmptyInput("at least one OOD set is required")
    reports = {name: compute_metrics(s) for name, s in items}
    average = {
        key: float(np.mean([getattr(r, key) for r in reports.values()]))
        for key in ("fpr_at_95", "auroc", "aupr")
    }
    return reports, average
