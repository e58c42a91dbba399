"""Registered finite-difference checks for every differentiable path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import grad_engine as ge
from .grad_engine import Tape
from .losses import contrastive_loss_op, cosine_similarity, cosine_similarity_grad, loss_gradient_similarities
from .mining import ContrastPlan, TempSchedule, plan_batch, plans_to_matrices
from .models import EncoderConfig, encoder_forward, init_params, projection_forward


@dataclass
class CheckResult:
    name: str
    max_error: float  # largest |a - n| / max(rtol*|n|, atol); <= 1 passes
    rtol: float
    atol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= 1.0)


def _score(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> float:
    allowed = np.maximum(rtol * np.abs(numeric), atol)
    return float(np.max(np.abs(analytic - numeric) / allowed)) if analytic.size else 0.0


def check_tape(name: str, build: Callable[[Tape, dict], ge.Tensor], arrays: dict[str, np.ndarray],
               rtol: float = 1e-6, atol: float = 1e-8, h: float = 1e-5) -> CheckResult:
    """Compare tape gradients of ``build`` against central differences for every array."""
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in arrays.items()}
    grads = ge.backward(tape, build(tape, leaves))
    worst = 0.0
    for k, arr in arrays.items():
        work = {kk: vv.copy() for kk, vv in arrays.items()}

        def f():
            t = Tape()
            return float(build(t, {kk: t.constant(vv) for kk, vv in work.items()}).data)

        numeric = ge.finite_difference(f, work[k], h)
        worst = max(worst, _score(grads[leaves[k]], numeric, rtol, atol))
    return CheckResult(name, worst, rtol, atol)


def _weighted_sum(x: ge.Tensor, seed: int) -> ge.Tensor:
    w = np.random.default_rng(seed).normal(size=x.shape)
    return ge.sum_all(ge.mul(x, w))


def check_conv1d(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(2, 16)), "w": rng.normal(size=(3, 2, 4)), "b": rng.normal(size=3)}
    return check_tape("conv1d", lambda t, p: _weighted_sum(ge.conv1d(p["x"], p["w"], p["b"], 2), seed), arrays)


def check_layernorm(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(3, 7)), "g": rng.normal(size=3), "o": rng.normal(size=3)}
    return check_tape("layernorm", lambda t, p: _weighted_sum(ge.layernorm(p["x"], p["g"], p["o"]), seed), arrays)


def check_gelu(seed: int = 0) -> CheckResult:
    arrays = {"x": np.random.default_rng(seed).normal(scale=2.0, size=20)}
    return check_tape("gelu", lambda t, p: _weighted_sum(ge.gelu(p["x"]), seed), arrays)


def check_dense(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=6), "w": rng.normal(size=(4, 6)), "b": rng.normal(size=4)}
    return check_tape("dense", lambda t, p: _weighted_sum(ge.dense(p["x"], p["w"], p["b"]), seed), arrays)


def check_cross_entropy(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays = {"h": rng.normal(size=(6, 8)), "w": rng.normal(size=(5, 8)), "b": rng.normal(size=5)}
    labels = rng.integers(0, 5, size=6)
    return check_tape("softmax_cross_entropy",
                      lambda t, p: ge.softmax_cross_entropy(ge.dense(p["h"], p["w"], p["b"]), labels), arrays)


def check_cosine(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    zi, zj = rng.normal(size=32), rng.normal(size=32)
    gi, gj = cosine_similarity_grad(zi, zj)
    ni = ge.finite_difference(lambda: cosine_similarity(zi, zj), zi)
    nj = ge.finite_difference(lambda: cosine_similarity(zi, zj), zj)
    err = max(_score(gi, ni, 0.0, 1e-7), _score(gj, nj, 0.0, 1e-7))
    return CheckResult("cosine_similarity", err, 0.0, 1e-7)


def random_plan(rng: np.random.Generator, n_pos: int, n_neg: int, tau_lo: float = 0.05, tau_hi: float = 1.0):
    """A random anchor row and plan; view 0 is the anchor."""
    v = 1 + n_pos + n_neg
    s = rng.uniform(-1.0, 1.0, size=v)
    members = rng.permutation(np.arange(1, v))
    taus = rng.uniform(tau_lo, tau_hi, size=v)
    plan = ContrastPlan(0, tuple((int(j), float(taus[j])) for j in members[:n_pos]),
                        tuple((int(j), float(taus[j])) for j in members[n_pos:]))
    return s, plan


def _stacked_loss(s_pos: np.ndarray, tau_pos: np.ndarray, s_neg: np.ndarray, tau_neg: np.ndarray) -> np.ndarray:
    """Adaptive-temperature loss for each row of stacked ``(R, |P|)`` / ``(R, |N|)`` similarities."""
    lp = s_pos / tau_pos
    ln = s_neg / tau_neg
    m = ln.max(axis=1, keepdims=True)
    log_neg = np.log(np.exp(ln - m).sum(axis=1, keepdims=True)) + m
    return np.mean(np.logaddexp(lp, log_neg) - lp, axis=1)


def check_contrastive_closed_form(instances: int = 1000, seed: int = 0, rtol: float = 1e-6,
                                  atol: float = 1e-8, h: float = 1e-5) -> CheckResult:
    """Closed-form dL/ds vs central differences of the forward loss over random plans."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        s, plan = random_plan(rng, int(rng.integers(1, 21)), int(rng.integers(1, 201)))
        analytic = loss_gradient_similarities(s, plan)
        n_pos = len(plan.positives)
        members = np.array(plan.positive_indices + plan.negative_indices)
        taus = np.array([t for _, t in plan.positives + plan.negatives])
        base = s[members]
        bump = h * np.eye(members.size)
        up, down = base + bump, base - bump
        f_up = _stacked_loss(up[:, :n_pos], taus[:n_pos], up[:, n_pos:], taus[n_pos:])
        f_down = _stacked_loss(down[:, :n_pos], taus[:n_pos], down[:, n_pos:], taus[n_pos:])
        numeric = (f_up - f_down) / (2 * h)
        worst = max(worst, _score(analytic[members], numeric, rtol, atol))
    return CheckResult("contrastive_closed_form", worst, rtol, atol)


MICRO_CONFIG = EncoderConfig(channels=(2, 2, 2, 2), kernel_size=4, stride=2, projection_hidden=4, projection_dim=3)


def micro_batch(seed: int = 0, views: int = 6, length: int = 64):
    rng = np.random.default_rng(seed)
    params = init_params(MICRO_CONFIG, seed)
    # perturb gains/offsets/biases away from their init values so every path is exercised
    for k in params.encoder:
        if not k.endswith(".w"):
            params.encoder[k] = params.encoder[k] + 0.1 * rng.normal(size=params.encoder[k].shape)
    for k in params.projection:
        if k.startswith("b"):
            params.projection[k] = 0.1 * rng.normal(size=params.projection[k].shape)
    x = rng.normal(size=(views, length))
    feats = rng.lognormal(size=(views // 2, 4)).repeat(2, axis=0)
    plans = plan_batch(feats, 2, TempSchedule(0.05, 0.1))
    return params, x, plans


def full_chain_loss(tape: Tape, enc: dict, proj: dict, x: ge.Tensor, plans, config: EncoderConfig = MICRO_CONFIG):
    h = encoder_forward(config, enc, x)
    z = projection_forward(proj, h)
    pos, neg, tau = plans_to_matrices(plans, x.shape[0])
    return contrastive_loss_op(ge.cosine_matrix(z), pos, neg, tau)


def check_full_chain(seed: int = 0, rtol: float = 1e-4, atol: float = 1e-7) -> CheckResult:
    """Encoder -> projection -> cosine -> adaptive-temperature loss, every parameter and the input."""
    params, x, plans = micro_batch(seed)
    arrays = {f"enc.{k}": v for k, v in params.encoder.items()}
    arrays.update({f"proj.{k}": v for k, v in params.projection.items()})
    arrays["input"] = x

    def build(tape, p):
        enc = {k[4:]: v for k, v in p.items() if k.startswith("enc.")}
        proj = {k[5:]: v for k, v in p.items() if k.startswith("proj.")}
        return full_chain_loss(tape, enc, proj, ge.reshape(p["input"], (x.shape[0], 1, x.shape[1])), plans)

    return check_tape("full_chain", build, arrays, rtol, atol)


REGISTRY: dict[str, Callable[[], CheckResult]] = {
    "conv1d": check_conv1d,
    "layernorm": check_layernorm,
    "gelu": check_gelu,
    "dense": check_dense,
    "softmax_cross_entropy": check_cross_entropy,
    "cosine_similarity": check_cosine,
    "contrastive_closed_form": check_contrastive_closed_form,
    "full_chain": check_full_chain,
}


def run_all() -> list[CheckResult]:
    return [fn() for fn in REGISTRY.values()]
