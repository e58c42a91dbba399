"""Pretraining loops, downstream evaluation protocols and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import grad_engine as ge
from .grad_engine import Tape
from .losses import contrastive_loss_op
from .mining import (TempSchedule, k_from_ratio, label_plans, plan_batch, plans_to_matrices,
                     sibling_plans)
from .models import (EncoderConfig, ModelParams, bind, classifier_forward, encode, encoder_forward,
                     init_classifier, init_params, predict, projection_forward)
from .prior_features import BandTable, prior_features
from .signal_data import AugmentConfig, Dataset, augment_batch

log = logging.getLogger(__name__)

N_CLASSES = 5
PRETRAIN_MODES = ("priorcl", "basic", "basic_feature", "unbiased")
MODES = PRETRAIN_MODES + ("supervised", "finetune")


class ConfigError(ValueError):
    pass


class LeakageError(RuntimeError):
    """Train and test partitions share a subject."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.  Defaults are the published protocol; see :meth:`desk`."""

    mode: str = "priorcl"
    batch_size: int = 128
    lr: float = 1e-4
    momentum: float = 0.9
    pretrain_epochs: int = 100
    eval_epochs: int = 50
    eval_lr: float = 1e-4
    k_ratio: float = 0.4
    schedule: TempSchedule = TempSchedule(0.05, 0.1)
    fixed_tau: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_fraction: float = 0.9

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not 0.0 < self.k_ratio < 1.0:
            raise ConfigError("k_ratio must lie in (0, 1)")
        if self.fixed_tau <= 0:
            raise ConfigError("fixed_tau must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized profile: batch 32, 20 pretraining epochs, larger step sizes."""
        base = dict(batch_size=32, pretrain_epochs=20, lr=0.003, eval_epochs=50, eval_lr=0.05)
        base.update(overrides)
        return cls(**base)

    @property
    def k(self) -> int:
        """Positives per anchor: ``k_ratio`` times the batch size in raw epochs."""
        return k_from_ratio(self.batch_size, self.k_ratio)


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1,
                "per_class_f1": [float(v) for v in self.per_class_f1],
                "confusion": self.confusion.astype(int).tolist()}


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; ``stream`` separates independent uses of one seed."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


# ---------------------------------------------------------------- metrics


def compute_metrics(predictions, labels, n_classes: int = N_CLASSES) -> Metrics:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions vs {true.shape[0]} labels")
    if pred.size == 0:
        raise ValueError("no predictions to score")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    pred_count = confusion.sum(axis=0)
    true_count = confusion.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros(n_classes), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros(n_classes), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return Metrics(float(tp.sum() / confusion.sum()), float(f1.mean()), f1, confusion)


# ---------------------------------------------------------------- optimizer


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Heavy-ball update ``v <- momentum*v + g``; ``p <- p - lr*v`` (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name!r} has {bad} non-finite entries")
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        params[name] -= lr * v
    return params, velocity


def _step_group(group: dict[str, np.ndarray], leaves: dict, grads: dict, velocity: dict, lr, momentum, prefix):
    g = {f"{prefix}.{k}": grads[t] for k, t in leaves.items()}
    p = {f"{prefix}.{k}": group[k] for k in group}
    sgd_step(p, g, velocity, lr, momentum)


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    params: ModelParams
    loss_history: list[float] = field(default_factory=list)


def batch_plans(mode: str, parent_features: np.ndarray, parent_labels: np.ndarray, config: TrainConfig):
    """Contrast plans for ``2*B`` interleaved views of ``B`` parent epochs."""
    views = 2 * parent_features.shape[0]
    if mode == "basic":
        return sibling_plans(views, config.fixed_tau)
    if mode == "unbiased":
        if np.any(parent_labels < 0):
            raise ConfigError("mode 'unbiased' needs labeled epochs")
        return label_plans(np.repeat(parent_labels, 2), config.fixed_tau)
    feats = np.repeat(parent_features, 2, axis=0)
    schedule = config.schedule if mode == "priorcl" else TempSchedule(config.fixed_tau, config.fixed_tau)
    return plan_batch(feats, config.k, schedule)


def contrastive_step(params: ModelParams, views: np.ndarray, plans, train_projection: bool = True):
    """Forward + backward for one batch of views; returns (loss, tape, leaves, grads)."""
    tape = Tape()
    enc = bind(tape, params.encoder)
    proj = bind(tape, params.projection, trainable=train_projection)
    h = encoder_forward(params.config, enc, tape.constant(views[:, None, :]))
    z = projection_forward(proj, h)
    sim = ge.cosine_matrix(z)
    pos, neg, tau = plans_to_matrices(plans, views.shape[0])
    loss = contrastive_loss_op(sim, pos, neg, tau)
    grads = ge.backward(tape, loss)
    return float(loss.data), enc, proj, grads


def pretrain(dataset: Dataset, config: TrainConfig, seed: int = 0,
             augment_config: AugmentConfig = AugmentConfig(),
             encoder_config: EncoderConfig = EncoderConfig(),
             bands: BandTable = BandTable(),
             params: ModelParams | None = None) -> PretrainResult:
    """Contrastive pretraining in one of ``priorcl``, ``basic``, ``basic_feature``, ``unbiased``."""
    mode = config.mode
    if mode not in PRETRAIN_MODES:
        raise ConfigError(f"pretrain does not run mode {mode!r}")
    n = len(dataset)
    if n < 2 * config.batch_size:
        raise ConfigError(f"dataset of {n} epochs is smaller than 2 x batch_size = {2 * config.batch_size}")
    if mode in ("priorcl", "basic_feature") and not 1 <= config.k < 2 * config.batch_size - 1:
        raise ConfigError(f"k={config.k} does not fit a batch of {2 * config.batch_size} views")
    params = init_params(encoder_config, seed) if params is None else params.copy()
    raw = dataset.samples()
    labels = dataset.labels()
    feats = prior_features(raw, dataset.sample_rate_hz, bands)
    rng = make_rng(seed, 1)
    velocity: dict[str, np.ndarray] = {}
    history = []
    n_batches = n // config.batch_size
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            views = augment_batch(raw[idx], augment_config, rng)
            plans = batch_plans(mode, feats[idx], labels[idx], config)
            loss, enc, proj, grads = contrastive_step(params, views, plans)
            _step_group(params.encoder, enc, grads, velocity, config.lr, config.momentum, "encoder")
            _step_group(params.projection, proj, grads, velocity, config.lr, config.momentum, "projection")
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("pretrain %s seed=%d epoch=%d loss=%.6f", mode, seed, epoch, history[-1])
    return PretrainResult(params, history)


# ---------------------------------------------------------------- downstream


def check_disjoint(train: Dataset, test: Dataset) -> None:
    shared = set(train.subject_ids().tolist()) & set(test.subject_ids().tolist())
    if shared:
        raise LeakageError(f"subjects {sorted(shared)} appear in both train and test")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_classifier(h_train: np.ndarray, y_train: np.ndarray, config: TrainConfig, seed: int,
                     encoder_config: EncoderConfig = EncoderConfig()) -> dict[str, np.ndarray]:
    """Softmax-regression head on fixed representations, trained with momentum SGD."""
    rng = make_rng(seed, 2)
    clf = init_classifier(encoder_config, rng)
    velocity: dict[str, np.ndarray] = {}
    for _ in range(config.eval_epochs):
        for idx in _batches(len(y_train), config.batch_size, rng):
            tape = Tape()
            leaves = bind(tape, clf)
            loss = ge.softmax_cross_entropy(classifier_forward(leaves, tape.constant(h_train[idx])), y_train[idx])
            grads = ge.backward(tape, loss)
            _step_group(clf, leaves, grads, velocity, config.eval_lr, config.momentum, "classifier")
    return clf


def linear_eval(frozen: ModelParams, train: Dataset, test: Dataset, config: TrainConfig, seed: int = 0) -> Metrics:
    """Fit only the classifier on top of the frozen encoder and score the test split.

    The projection head is never read.
    """
    check_disjoint(train, test)
    before = frozen.encoder_checksum()
    h_train = encode(frozen, train.samples())
    h_test = encode(frozen, test.samples())
    clf = train_classifier(h_train, train.labels(), config, seed, frozen.config)
    if frozen.encoder_checksum() != before:
        raise RuntimeError("encoder parameters changed during linear evaluation")
    tape = Tape()
    logits = classifier_forward(bind(tape, clf, False), tape.constant(h_test)).data
    return compute_metrics(predict(logits), test.labels())


def select_recordings(train: Dataset, n_recordings: int | None, seed: int) -> Dataset:
    recs = train.recordings()
    if n_recordings is None or n_recordings >= len(recs):
        if n_recordings is not None and n_recordings > len(recs):
            raise ConfigError(f"requested {n_recordings} recordings, only {len(recs)} available")
        return train
    if n_recordings < 1:
        raise ConfigError("n_recordings must be >= 1")
    chosen = set(make_rng(seed, 3).choice(recs, size=n_recordings, replace=False).tolist())
    return train.subset([i for i, e in enumerate(train.epochs) if e.source_id in chosen])


def finetune(pretrained: ModelParams, train: Dataset, test: Dataset, n_recordings: int | None,
             config: TrainConfig, seed: int = 0) -> Metrics:
    """Jointly train encoder and a fresh classifier on ``n_recordings`` labeled recordings (``None`` = all).

    The encoder steps with ``lr``, the new classifier with ``eval_lr``.
    """
    check_disjoint(train, test)
    subset = select_recordings(train, n_recordings, seed)
    params = pretrained.copy()
    rng = make_rng(seed, 4)
    params.classifier = init_classifier(params.config, rng)
    x, y = subset.samples(), subset.labels()
    velocity: dict[str, np.ndarray] = {}
    for _ in range(config.eval_epochs):
        for idx in _batches(len(y), config.batch_size, rng):
            tape = Tape()
            enc = bind(tape, params.encoder)
            clf = bind(tape, params.classifier)
            h = encoder_forward(params.config, enc, tape.constant(x[idx][:, None, :]))
            loss = ge.softmax_cross_entropy(classifier_forward(clf, h), y[idx])
            grads = ge.backward(tape, loss)
            _step_group(params.encoder, enc, grads, velocity, config.lr, config.momentum, "encoder")
            _step_group(params.classifier, clf, grads, velocity, config.eval_lr, config.momentum, "classifier")
    logits = classify_samples(params, test.samples())
    return compute_metrics(predict(logits), test.labels())


def supervised(train: Dataset, test: Dataset, n_recordings: int | None, config: TrainConfig, seed: int = 0,
               encoder_config: EncoderConfig = EncoderConfig()) -> Metrics:
    """Same protocol as :func:`finetune`, from a randomly initialised encoder."""
    return finetune(init_params(encoder_config, seed), train, test, n_recordings, config, seed)


def classify_samples(params: ModelParams, samples: np.ndarray) -> np.ndarray:
    h = encode(params, samples)
    tape = Tape()
    return classifier_forward(bind(tape, params.classifier, False), tape.constant(h)).data


# ---------------------------------------------------------------- prior-feature KNN


def knn_predict(train_features, train_labels, test_features, k_neighbors: int = 5,
                n_classes: int = N_CLASSES) -> np.ndarray:
    """Majority vote of the ``k`` nearest training features (Euclidean).

    Vote ties go to the class with the smallest summed neighbour distance,
    then to the lowest class index.
    """
    xtr = np.asarray(train_features, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    xte = np.atleast_2d(np.asarray(test_features, dtype=np.float64))
    if xtr.shape[0] == 0:
        raise ValueError("empty training set")
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    k = min(k_neighbors, xtr.shape[0])
    out = np.empty(xte.shape[0], dtype=np.int64)
    for i, q in enumerate(xte):
        dist = np.sqrt(np.sum((xtr - q) ** 2, axis=1))
        nearest = np.lexsort((np.arange(dist.size), dist))[:k]
        votes = np.bincount(ytr[nearest], minlength=n_classes)
        summed = np.bincount(ytr[nearest], weights=dist[nearest], minlength=n_classes)
        best = [c for c in range(n_classes) if votes[c] == votes.max()]
        out[i] = min(best, key=lambda c: (summed[c], c))
    return out


def knn_prior_baseline(train: Dataset, test: Dataset, k_neighbors: int = 5,
                       bands: BandTable = BandTable()) -> Metrics:
    check_disjoint(train, test)
    ftr = prior_features(train.samples(), train.sample_rate_hz, bands)
    fte = prior_features(test.samples(), test.sample_rate_hz, bands)
    return compute_metrics(knn_predict(ftr, train.labels(), fte, k_neighbors), test.labels())


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation over seeds."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def with_mode(config: TrainConfig, mode: str) -> TrainConfig:
    return replace(config, mode=mode)
