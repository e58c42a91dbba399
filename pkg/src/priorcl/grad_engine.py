"""Minimal reverse-mode differentiation over numpy float64 arrays.

A :class:`Tape` records every operation in creation order.  Each recorded
:class:`Tensor` keeps its parents and a closure that maps the upstream
gradient to per-parent contributions; :func:`backward` walks the tape in
reverse and accumulates.

Only the operators needed by the encoder, projection head, classifier and
contrastive losses are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending axis."""


class GradientContractError(RuntimeError):
    """Raised when backward() is called on something other than a scalar."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node on a tape: value plus the recipe for its local gradients."""

    __slots__ = ("data", "tape", "parents", "backward_fn", "requires_grad", "name", "index")

    def __init__(self, data, tape: "Tape", parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn: BackwardFn | None = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.index = tape._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of tensors; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, tensor: Tensor) -> int:
        self.nodes.append(tensor)
        return len(self.nodes) - 1

    def leaf(self, data, name=None, requires_grad=True) -> Tensor:
        return Tensor(np.array(data, dtype=np.float64), self, requires_grad=requires_grad, name=name)

    def constant(self, data, name=None) -> Tensor:
        return Tensor(np.asarray(data, dtype=np.float64), self, requires_grad=False, name=name)

    def record(self, value, parents: Iterable[Tensor], backward_fn: BackwardFn, name=None) -> Tensor:
        """Register a custom op whose local gradient is supplied by ``backward_fn``."""
        parents = tuple(parents)
        for p in parents:
            if p.tape is not self:
                raise ValueError("operands belong to different tapes")
        return Tensor(value, self, parents, backward_fn, name=name)


def _tape_of(*items) -> Tape:
    for item in items:
        if isinstance(item, Tensor):
            return item.tape
    raise ValueError("at least one operand must be a Tensor")


def _lift(tape: Tape, x) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(node) for every node that requires grad.

    Returns a map from each leaf that requires grad to its gradient (zeros
    for leaves the loss does not depend on).
    """
    if loss.data.size != 1:
        raise GradientContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None) if node.parents else grads.get(node.index)
        if g is None or node.backward_fn is None:
            continue
        contributions = node.backward_fn(g)
        for parent, contrib in zip(node.parents, contributions):
            if contrib is None or not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + contrib
            else:
                grads[parent.index] = contrib
    out = {}
    for node in tape.nodes:
        if not node.parents and node.requires_grad:
            out[node] = grads.get(node.index, np.zeros_like(node.data))
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return x.tape.record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return x.tape.record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sum_all(x: Tensor) -> Tensor:
    return x.tape.record(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return x.tape.record(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n),))


def norm(x: Tensor, axis=-1) -> Tensor:
    """L2 norm along ``axis``; gradient at the zero vector is taken as zero."""
    r = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.where(r > 0, r, 1.0)

    def bwd(g):
        return (np.expand_dims(g, axis) * x.data / safe,)

    return x.tape.record(np.squeeze(r, axis=axis), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data ** 2)
    return x.tape.record(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# ---------------------------------------------------------------- layers


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution.

    ``x`` is ``(C_in, T)`` or batched ``(B, C_in, T)``; ``weight`` is
    ``(C_out, C_in, k)``.  Output length is ``(T - k) // stride + 1``.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"input must be 2-D or 3-D, got shape {x.shape}")
    w = weight.data
    c_out, c_in, k = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"channel axis mismatch: input has {xd.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias axis mismatch: expected ({c_out},), got {bias.shape}")
    t_in = xd.shape[2]
    if t_in < k:
        raise ShapeError(f"time axis too short: length {t_in} < kernel {k}")
    t_out = (t_in - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xd, k, axis=2)[:, :, : (t_out - 1) * stride + 1 : stride, :]
    # windows: (B, C_in, T_out, k)
    cols = windows.transpose(0, 2, 1, 3).reshape(xd.shape[0], t_out, c_in * k)
    w2 = w.reshape(c_out, c_in * k)
    out = (cols @ w2.T).transpose(0, 2, 1) + bias.data[None, :, None]

    def bwd(g):
        gb = g[None] if squeeze else g
        gt = gb.transpose(0, 2, 1)  # (B, T_out, C_out)
        dw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        db = gb.sum(axis=(0, 2))
        dcols = (gt @ w2).reshape(xd.shape[0], t_out, c_in, k)
        dx = np.zeros_like(xd)
        stop = (t_out - 1) * stride + 1
        for j in range(k):
            dx[:, :, j : j + stop : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return (dx[0] if squeeze else dx), dw, db

    return x.tape.record(out[0] if squeeze else out, (x, weight, bias), bwd)


def layernorm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over its (channel, time) map, then per-channel affine.

    For ``(C, T)`` input one sample is assumed; ``(B, C, T)`` normalizes each
    of the ``B`` maps separately.  ``gain``/``offset`` have shape ``(C,)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    c = xd.shape[1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ShapeError(f"affine axis mismatch: expected ({c},), got gain {gain.shape} offset {offset.shape}")
    mu = xd.mean(axis=(1, 2), keepdims=True)
    centered = xd - mu
    var = (centered ** 2).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data[None, :, None] + offset.data[None, :, None]

    def bwd(g):
        gb = g[None] if squeeze else g
        dgain = (gb * xhat).sum(axis=(0, 2))
        doffset = gb.sum(axis=(0, 2))
        dxhat = gb * gain.data[None, :, None]
        dx = inv * (dxhat - dxhat.mean(axis=(1, 2), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(1, 2), keepdims=True))
        return (dx[0] if squeeze else dx), dgain, doffset

    return x.tape.record(out[0] if squeeze else out, (x, gain, offset), bwd)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` for ``x`` of shape ``(n,)`` or ``(B, n)``."""
    m, n = weight.shape
    if x.shape[-1] != n:
        raise ShapeError(f"feature axis mismatch: input has {x.shape[-1]}, weight expects {n}")
    if bias.shape != (m,):
        raise ShapeError(f"bias axis mismatch: expected ({m},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def bwd(g):
        if g.ndim == 1:
            return g @ weight.data, np.outer(g, x.data), g
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return x.tape.record(out, (x, weight, bias), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return x.tape.record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing time axis."""
    t = x.shape[-1]
    return x.tape.record(x.data.mean(axis=-1), (x,),
                         lambda g: (np.repeat(g[..., None] / t, t, axis=-1),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``(B, K)`` (or ``(K,)``) logits against integer labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    squeeze = logits.data.ndim == 1
    z = logits.data[None] if squeeze else logits.data
    if z.shape[0] != labels.shape[0]:
        raise ShapeError(f"batch axis mismatch: {z.shape[0]} logits rows vs {labels.shape[0]} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = z.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def bwd(g):
        d = np.exp(logp)
        d[np.arange(b), labels] -= 1.0
        d *= g / b
        return (d[0] if squeeze else d,)

    return logits.tape.record(loss, (logits,), bwd)


def cosine_matrix(z: Tensor, guard: float = 1e-12) -> Tensor:
    """All-pairs cosine similarity of the rows of ``z``; norms carry ``+guard``."""
    r = np.sqrt((z.data ** 2).sum(axis=1, keepdims=True))
    n = r + guard
    u = z.data / n
    s = u @ u.T
    r_safe = np.where(r > 0, r, 1.0)

    def bwd(g):
        du = (g + g.T) @ u
        proj = (z.data * du).sum(axis=1, keepdims=True)
        return (du / n - z.data * proj / (r_safe * n * n),)

    return z.tape.record(s, (z,), bwd)


# ---------------------------------------------------------------- checking


def finite_difference(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``array`` (mutated in place, restored)."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return out


def grad_matches(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-6, atol: float = 1e-8) -> bool:
    """Elementwise ``|a - n| <= max(rtol*|n|, atol)``."""
    return bool(np.all(np.abs(analytic - numeric) <= np.maximum(rtol * np.abs(numeric), atol)))
