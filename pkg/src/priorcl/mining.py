"""In-batch positive mining on prior features with rank-based temperatures."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .prior_features import DEFAULT_EPS, dissimilarity_row


@dataclass(frozen=True)
class TempSchedule:
    tau_min: float = 0.05
    tau_max: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tau_min <= self.tau_max:
            raise ValueError(f"need 0 < tau_min <= tau_max, got {self.tau_min}, {self.tau_max}")


@dataclass(frozen=True)
class ContrastPlan:
    """Positives and negatives of one anchor view, each as ``(view index, temperature)``.

    Both lists are ordered by ascending dissimilarity to the anchor.
    """

    anchor: int
    positives: tuple[tuple[int, float], ...]
    negatives: tuple[tuple[int, float], ...]

    @property
    def positive_indices(self) -> list[int]:
        return [i for i, _ in self.positives]

    @property
    def negative_indices(self) -> list[int]:
        return [i for i, _ in self.negatives]

    def check(self, n_views: int, schedule: TempSchedule | None = None) -> None:
        """Raise ``AssertionError`` if any plan invariant is broken."""
        pos, neg = set(self.positive_indices), set(self.negative_indices)
        assert not pos & neg, "positive and negative sets overlap"
        assert self.anchor not in pos | neg, "anchor listed as a member"
        assert len(self.positives) + len(self.negatives) == n_views - 1, "members do not cover the batch"
        if schedule is not None:
            for _, tau in self.positives + self.negatives:
                assert schedule.tau_min - 1e-15 <= tau <= schedule.tau_max + 1e-15, f"temperature {tau} out of range"
        taus_p = [t for _, t in self.positives]
        taus_n = [t for _, t in self.negatives]
        assert all(a <= b for a, b in zip(taus_p, taus_p[1:])), "positive temperatures not non-decreasing"
        assert all(a >= b for a, b in zip(taus_n, taus_n[1:])), "negative temperatures not non-increasing"


def rank_candidates(anchor_feature, batch_features, anchor_index: int, eps: float = DEFAULT_EPS) -> list[int]:
    """All batch indices except the anchor, by ascending dissimilarity; ties go to the lower index."""
    feats = np.asarray(batch_features, dtype=np.float64)
    if feats.shape[0] < 2:
        raise ValueError("ranking needs a batch of at least 2")
    others = np.array([i for i in range(feats.shape[0]) if i != anchor_index])
    d = dissimilarity_row(anchor_feature, feats[others], eps)
    order = np.lexsort((others, d))
    return others[order].tolist()


def build_plan(ranking: Sequence[int], k: int, schedule: TempSchedule, anchor: int) -> ContrastPlan:
    """Top ``k`` ranked members become positives; temperatures follow zero-based rank.

    Positives rise from ``tau_min`` in steps of ``(tau_max - tau_min)/|P|``;
    negatives fall from ``tau_max`` in steps of ``(tau_max - tau_min)/|N|``.
    """
    if not 1 <= k < len(ranking):
        raise ValueError(f"k must satisfy 1 <= k < {len(ranking)}, got {k}")
    span = schedule.tau_max - schedule.tau_min
    pos_ids, neg_ids = ranking[:k], ranking[k:]
    n_pos, n_neg = len(pos_ids), len(neg_ids)
    positives = tuple((int(j), schedule.tau_min + r * span / n_pos) for r, j in enumerate(pos_ids))
    negatives = tuple((int(j), schedule.tau_max - r * span / n_neg) for r, j in enumerate(neg_ids))
    return ContrastPlan(int(anchor), positives, negatives)


def k_from_ratio(batch_size: int, ratio: float) -> int:
    """``max(1, round(ratio * batch_size))`` with halves rounded up."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    return max(1, math.floor(ratio * batch_size + 0.5))


def plan_batch(features, k: int, schedule: TempSchedule, eps: float = DEFAULT_EPS) -> list[ContrastPlan]:
    """One plan per view, each view taking its turn as anchor."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] < k + 2:
        raise ValueError(f"batch of {feats.shape[0]} views is too small for k={k}")
    return [build_plan(rank_candidates(feats[i], feats, i, eps), k, schedule, i) for i in range(feats.shape[0])]


def sibling_plans(n_views: int, tau: float) -> list[ContrastPlan]:
    """SimCLR-style plans: views ``2i`` and ``2i+1`` are each other's only positive."""
    plans = []
    for a in range(n_views):
        sib = a ^ 1
        negs = tuple((j, tau) for j in range(n_views) if j not in (a, sib))
        plans.append(ContrastPlan(a, ((sib, tau),), negs))
    return plans


def label_plans(labels: Sequence[int], tau: float) -> list[ContrastPlan]:
    """Every other view with the anchor's label is a positive (requires labels)."""
    labels = list(labels)
    plans = []
    for a, la in enumerate(labels):
        pos = tuple((j, tau) for j, lj in enumerate(labels) if j != a and lj == la)
        neg = tuple((j, tau) for j, lj in enumerate(labels) if j != a and lj != la)
        plans.append(ContrastPlan(a, pos, neg))
    return plans


def plans_to_matrices(plans: Sequence[ContrastPlan], n_views: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense ``(positive mask, negative mask, temperature)`` matrices indexed ``[anchor, member]``."""
    pos = np.zeros((n_views, n_views), dtype=bool)
    neg = np.zeros((n_views, n_views), dtype=bool)
    tau = np.ones((n_views, n_views))
    for plan in plans:
        for j, t in plan.positives:
            pos[plan.anchor, j] = True
            tau[plan.anchor, j] = t
        for j, t in plan.negatives:
            neg[plan.anchor, j] = True
            tau[plan.anchor, j] = t
    return pos, neg, tau


def positive_precision(plans: Sequence[ContrastPlan], labels: Sequence[int]) -> float:
    """Mean over anchors of the fraction of positives sharing the anchor's label."""
    labels = np.asarray(labels)
    fracs = [np.mean(labels[p.positive_indices] == labels[p.anchor]) for p in plans if p.positives]
    return float(np.mean(fracs))
