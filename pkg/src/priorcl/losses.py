"""Single-positive, multi-positive and adaptive-temperature contrastive losses.

Gradients with respect to similarities are closed form.  A similarity row
is indexed by view; the anchor's own entry is never read.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grad_engine import Tensor
from .mining import ContrastPlan

NORM_GUARD = 1e-12


def cosine_similarity(z_i, z_j) -> float:
    z_i, z_j = np.asarray(z_i, dtype=np.float64), np.asarray(z_j, dtype=np.float64)
    return float(z_i @ z_j / ((np.linalg.norm(z_i) + NORM_GUARD) * (np.linalg.norm(z_j) + NORM_GUARD)))


def cosine_similarity_grad(z_i, z_j) -> tuple[np.ndarray, np.ndarray]:
    """(ds/dz_i, ds/dz_j) of the guarded cosine similarity."""
    z_i, z_j = np.asarray(z_i, dtype=np.float64), np.asarray(z_j, dtype=np.float64)

    def one_side(a, b):
        ra, rb = np.linalg.norm(a), np.linalg.norm(b)
        na, nb = ra + NORM_GUARD, rb + NORM_GUARD
        dot = a @ b
        # d/da [a.b / (na nb)] = b/(na nb) - (a.b) a / (ra na^2 nb)
        corr = a * dot / ((ra if ra > 0 else 1.0) * na * na * nb)
        return b / (na * nb) - corr

    return one_side(z_i, z_j), one_side(z_j, z_i)


def _logsumexp(v: np.ndarray) -> float:
    if v.size == 0:
        return -np.inf
    m = v.max()
    return float(m + np.log(np.sum(np.exp(v - m))))


def loss_simclr(similarities, positive: int, tau: float, anchor: int | None = None) -> float:
    """``-log(exp(s_p/t) / (exp(s_p/t) + sum_n exp(s_n/t)))``; every non-anchor entry other than ``positive`` is a negative."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = np.asarray(similarities, dtype=np.float64)
    keep = [j for j in range(s.size) if j != positive and j != anchor]
    lp = s[positive] / tau
    lse = _logsumexp(np.concatenate(([lp], s[keep] / tau)))
    return float(lse - lp)


@dataclass
class LossBreakdown:
    total: float
    per_anchor: np.ndarray
    grad_wrt_similarities: np.ndarray  # [anchor, member]; zero outside the plan


def _members(plan: ContrastPlan):
    if not plan.positives:
        raise ValueError(f"anchor {plan.anchor} has an empty positive set")
    p_idx = np.array(plan.positive_indices, dtype=np.int64)
    p_tau = np.array([t for _, t in plan.positives])
    n_idx = np.array(plan.negative_indices, dtype=np.int64)
    n_tau = np.array([t for _, t in plan.negatives])
    if np.any(p_tau <= 0) or np.any(n_tau <= 0):
        raise ValueError("temperatures must be positive")
    return p_idx, p_tau, n_idx, n_tau


def loss_multipositive(similarities, plan: ContrastPlan) -> float:
    """Mean over positives of ``-log(e_p / (e_p + sum_n e_n))`` with ``e_j = exp(s_j / tau_j)``.

    Each positive's denominator holds that positive and all negatives, never
    the other positives.
    """
    s = np.asarray(similarities, dtype=np.float64)
    p_idx, p_tau, n_idx, n_tau = _members(plan)
    lp = s[p_idx] / p_tau
    log_neg = _logsumexp(s[n_idx] / n_tau)
    return float(np.mean(np.logaddexp(lp, log_neg) - lp))


def loss_gradient_similarities(similarities, plan: ContrastPlan) -> np.ndarray:
    """dL/ds for one anchor in closed form; zero at the anchor.

    Positive p:  ``-(1/(tau_p |P|)) * A / (e_p + A)``
    Negative n:  ``(1/(tau_n |P|)) * sum_p e_n / (e_p + A)``
    where ``A = sum_n e_n``.
    """
    s = np.asarray(similarities, dtype=np.float64)
    p_idx, p_tau, n_idx, n_tau = _members(plan)
    n_pos = p_idx.size
    lp = s[p_idx] / p_tau
    ln = s[n_idx] / n_tau
    log_neg = _logsumexp(ln)
    log_den = np.logaddexp(lp, log_neg)  # per positive
    grad = np.zeros_like(s)
    grad[p_idx] = -np.exp(log_neg - log_den) / (p_tau * n_pos)
    if n_idx.size:
        log_weight = _logsumexp(-log_den)
        grad[n_idx] = np.exp(ln + log_weight) / (n_tau * n_pos)
    return grad


def batch_loss(sim_matrix: np.ndarray, pos: np.ndarray, neg: np.ndarray, tau: np.ndarray) -> LossBreakdown:
    """Mean adaptive-temperature loss over all anchors of a ``(V, V)`` similarity matrix.

    ``pos``/``neg`` are boolean membership masks and ``tau`` the temperature
    matrix, all indexed ``[anchor, member]`` (see ``mining.plans_to_matrices``).
    """
    s = np.asarray(sim_matrix, dtype=np.float64)
    v = s.shape[0]
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise ValueError(f"anchors {np.flatnonzero(n_pos == 0).tolist()} have no positives")
    logits = s / tau
    with np.errstate(divide="ignore"):
        return _batch_loss(logits, pos, neg, tau, n_pos, v)


def _batch_loss(logits, pos, neg, tau, n_pos, v) -> LossBreakdown:
    neg_logits = np.where(neg, logits, -np.inf)
    m = neg_logits.max(axis=1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    log_neg = np.log(np.sum(np.exp(neg_logits - m_safe), axis=1, keepdims=True)) + m_safe  # (V, 1)
    log_den = np.logaddexp(logits, log_neg)
    terms = np.where(pos, log_den - logits, 0.0)
    per_anchor = terms.sum(axis=1) / n_pos
    coef = 1.0 / (tau * n_pos[:, None])
    grad_pos = -np.exp(log_neg - log_den) * coef
    inv = np.where(pos, -log_den, -np.inf)
    mi = inv.max(axis=1, keepdims=True)
    log_weight = np.log(np.sum(np.exp(inv - mi), axis=1, keepdims=True)) + mi
    grad_neg = np.exp(neg_logits + log_weight) * coef
    grad = np.where(pos, grad_pos, np.where(neg, grad_neg, 0.0))
    return LossBreakdown(float(per_anchor.mean()), per_anchor, grad / v)


def contrastive_loss_op(sim: Tensor, pos: np.ndarray, neg: np.ndarray, tau: np.ndarray) -> Tensor:
    """Record :func:`batch_loss` on ``sim``'s tape with its closed-form gradient."""
    result = batch_loss(sim.data, pos, neg, tau)
    return sim.tape.record(result.total, (sim,), lambda g: (g * result.grad_wrt_similarities,), name="contrastive")


def plans_loss(sim_matrix: np.ndarray, plans: Sequence[ContrastPlan]) -> LossBreakdown:
    """Per-plan reference path: loops :func:`loss_multipositive` and its gradient."""
    v = sim_matrix.shape[0]
    per = np.array([loss_multipositive(sim_matrix[p.anchor], p) for p in plans])
    grad = np.zeros((v, v))
    for p in plans:
        grad[p.anchor] = loss_gradient_similarities(sim_matrix[p.anchor], p) / len(plans)
    return LossBreakdown(float(per.mean()), per, grad)


# ---------------------------------------------------------------- gradient curves


def gradient_curve(target: str, tau_target: float, s_values, n_pos: int = 10, n_neg: int = 100,
                   tau_other: float = 0.1, s_other_pos: float = 0.0, s_other_neg: float = 0.0) -> np.ndarray:
    """Sweep one member's similarity and return ``(s, dL/ds)`` rows.

    ``target`` is ``"positive"`` or ``"negative"``; that member carries
    ``tau_target`` while every other member uses ``tau_other`` with the
    fixed similarities ``s_other_pos`` / ``s_other_neg``.
    """
    if target not in ("positive", "negative"):
        raise ValueError("target must be 'positive' or 'negative'")
    s_values = np.asarray(s_values, dtype=np.float64)
    # view 0 is the anchor; 1..n_pos positives; the rest negatives; index 1 or n_pos+1 is swept
    v = 1 + n_pos + n_neg
    hit = 1 if target == "positive" else n_pos + 1
    base = np.empty(v)
    base[1 : n_pos + 1] = s_other_pos
    base[n_pos + 1 :] = s_other_neg
    base[0] = 1.0
    positives = tuple((j, tau_target if j == hit else tau_other) for j in range(1, n_pos + 1))
    negatives = tuple((j, tau_target if j == hit else tau_other) for j in range(n_pos + 1, v))
    plan = ContrastPlan(0, positives, negatives)
    rows = []
    for s in s_values:
        row = base.copy()
        row[hit] = s
        rows.append((s, loss_gradient_similarities(row, plan)[hit]))
    return np.array(rows)
