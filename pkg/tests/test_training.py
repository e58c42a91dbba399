import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from priorcl.grad_engine import Tape, cosine_matrix
from priorcl.losses import loss_simclr
from priorcl.mining import TempSchedule
from priorcl.models import EncoderConfig, encode, init_params, project
from priorcl.signal_data import AugmentConfig, Dataset, augment_batch, split_by_subject, synth_dataset
from priorcl.training import (ConfigError, LeakageError, NonFiniteGradientError, TrainConfig, batch_plans,
                              compute_metrics, contrastive_step, finetune, knn_predict, knn_prior_baseline,
                              linear_eval, make_rng, predict, pretrain, select_recordings, sgd_step, summarize,
                              supervised, train_classifier, with_mode)

ORACLE = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())
TINY = TrainConfig.desk(batch_size=8, pretrain_epochs=2, eval_epochs=3)


@pytest.fixture(scope="module")
def small_data():
    ds = synth_dataset(8, seed=3, subjects=4)
    return ds, *split_by_subject(ds, 0.75, 0)


class TestSgd:
    def test_plain_step(self):
        p, g = {"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, 0.25])}
        sgd_step(p, g, {}, 0.1, 0.0)
        np.testing.assert_array_equal(p["w"], [1.0 - 0.05, -2.0 - 0.025])

    def test_two_momentum_steps(self):
        p, v, g = {"w": np.zeros(1)}, {}, {"w": np.ones(1)}
        sgd_step(p, g, v, 0.1, 0.9)
        sgd_step(p, g, v, 0.1, 0.9)
        assert p["w"][0] == pytest.approx(-0.1 * 2.9, rel=1e-15)

    def test_quadratic(self):
        p, v = {"x": np.array([1.0])}, {}
        for _ in range(200):
            sgd_step(p, {"x": p["x"].copy()}, v, 0.1, 0.9)
        assert abs(p["x"][0]) < 1e-3
        assert p["x"][0] == pytest.approx(ORACLE["quadratic_200_steps"], rel=1e-9)

    def test_non_finite_names_parameter(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        with pytest.raises(NonFiniteGradientError, match="'b'"):
            sgd_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, {}, 0.1, 0.9)
        assert np.array_equal(p["a"], np.ones(2))


class TestMetrics:
    def test_perfect(self):
        y = np.arange(5).repeat(3)
        m = compute_metrics(y, y)
        assert m.accuracy == 1.0 and m.macro_f1 == 1.0

    def test_constant_wake(self):
        y = np.arange(5).repeat(4)
        m = compute_metrics(np.zeros_like(y), y)
        assert m.accuracy == pytest.approx(0.2)
        assert m.per_class_f1[0] == pytest.approx(1 / 3)
        assert m.macro_f1 == pytest.approx(1 / 15)

    def test_oracle_confusion(self):
        case = ORACLE["confusion_case"]
        conf = np.array(case["confusion"])
        true = np.repeat(np.arange(5), conf.sum(axis=1))
        pred = np.concatenate([np.repeat(np.arange(5), row) for row in conf])
        m = compute_metrics(pred, true)
        np.testing.assert_array_equal(m.confusion, conf)
        assert m.accuracy == pytest.approx(case["accuracy"], rel=1e-14)
        np.testing.assert_allclose(m.per_class_f1, case["per_class_f1"], rtol=1e-14)
        assert m.macro_f1 == pytest.approx(case["macro_f1"], rel=1e-14)

    def test_invariants(self):
        rng = np.random.default_rng(0)
        y, p = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
        m = compute_metrics(p, y)
        assert m.accuracy == np.trace(m.confusion) / m.confusion.sum()
        assert m.macro_f1 == pytest.approx(m.per_class_f1.mean(), rel=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_metrics([0, 1], [0])
        with pytest.raises(ValueError):
            compute_metrics([], [])

    def test_summary(self):
        mean, std = summarize([0.7, 0.8, 0.9])
        assert mean == pytest.approx(0.8) and std == pytest.approx(0.1)


class TestKnn:
    def test_exact_match(self):
        train = np.random.default_rng(0).normal(size=(10, 4))
        labels = np.arange(10) % 5
        assert knn_predict(train, labels, train[7], 1)[0] == labels[7]

    def test_single_class(self):
        rng = np.random.default_rng(1)
        assert set(knn_predict(rng.normal(size=(8, 4)), np.full(8, 3), rng.normal(size=(5, 4)), 3)) == {3}

    def test_vote_tie_by_distance(self):
        train = np.array([[1.0, 0, 0, 0], [3.0, 0, 0, 0]])
        assert knn_predict(train, [4, 2], np.zeros(4), 2)[0] == 4
        assert knn_predict(train[::-1], [2, 4], np.zeros(4), 2)[0] == 4

    def test_vote_tie_by_label(self):
        train = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])
        assert knn_predict(train, [3, 1], np.zeros(4), 2)[0] == 1

    def test_errors(self):
        with pytest.raises(ValueError):
            knn_predict(np.zeros((0, 4)), [], np.zeros(4))
        with pytest.raises(ValueError):
            knn_predict(np.zeros((2, 4)), [0, 1], np.zeros(4), 0)

    def test_synthetic_above_chance(self):
        train, test = split_by_subject(synth_dataset(20, seed=5), 0.8, 0)
        assert knn_prior_baseline(train, test).accuracy > 0.2


class TestPlansPerMode:
    def test_unbiased_plans_are_label_sets(self):
        labels = np.array([0, 1, 2, 3, 4, 2, 0, 1])
        plans = batch_plans("unbiased", np.ones((8, 4)), labels, TINY)
        view_labels = np.repeat(labels, 2)
        for p in plans:
            assert set(p.positive_indices) == set(np.flatnonzero(view_labels == view_labels[p.anchor])) - {p.anchor}

    def test_unbiased_needs_labels(self):
        with pytest.raises(ConfigError):
            batch_plans("unbiased", np.ones((4, 4)), np.full(4, -1), TINY)

    def test_basic_is_simclr(self, small_data):
        ds = small_data[0]
        params = init_params(seed=0)
        raw = ds.samples()[:8]
        views = augment_batch(raw, AugmentConfig(), make_rng(0, 9))
        config = replace(TINY, schedule=TempSchedule(0.1, 0.1))
        loss, *_ = contrastive_step(params, views, batch_plans("basic", np.ones((8, 4)), np.zeros(8), config))
        tape = Tape()
        s = cosine_matrix(tape.constant(project(params, encode(params, views)))).data
        expect = np.mean([loss_simclr(s[i], i ^ 1, 0.1, anchor=i) for i in range(16)])
        assert loss == pytest.approx(expect, rel=1e-12)


class TestModeLattice:
    def test_uniform_schedule_equals_basic_feature(self, small_data):
        ds = small_data[0].unlabeled()
        flat = replace(TINY, schedule=TempSchedule(0.1, 0.1), fixed_tau=0.1)
        a = pretrain(ds, with_mode(flat, "priorcl"), seed=1)
        b = pretrain(ds, with_mode(flat, "basic_feature"), seed=1)
        assert a.loss_history == b.loss_history
        assert a.params.encoder_checksum() == b.params.encoder_checksum()

    def test_single_positive_equals_basic(self, small_data):
        ds = small_data[0].unlabeled()
        one = replace(TINY, k_ratio=0.06)
        assert one.k == 1
        a = pretrain(ds, with_mode(one, "basic_feature"), seed=2)
        b = pretrain(ds, with_mode(one, "basic"), seed=2)
        assert a.loss_history == b.loss_history
        assert a.params.encoder_checksum() == b.params.encoder_checksum()


class TestPretrain:
    def test_reproducible(self, small_data):
        ds = small_data[0].unlabeled()
        a, b = pretrain(ds, TINY, seed=4), pretrain(ds, TINY, seed=4)
        assert a.loss_history == b.loss_history
        assert a.params.encoder_checksum() == b.params.encoder_checksum()
        assert pretrain(ds, TINY, seed=5).loss_history != a.loss_history

    def test_loss_decreases(self):
        ds = synth_dataset(16, seed=6).unlabeled()
        config = TrainConfig.desk(batch_size=16, pretrain_epochs=6)
        for seed in range(5):
            history = pretrain(ds, config, seed=seed).loss_history
            assert np.all(np.isfinite(history))
            assert history[-1] < history[0]

    def test_dataset_too_small(self, small_data):
        with pytest.raises(ConfigError):
            pretrain(small_data[0].subset(range(10)), TINY)

    def test_supervised_mode_rejected(self, small_data):
        with pytest.raises(ConfigError):
            pretrain(small_data[0], with_mode(TINY, "supervised"))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="moco")

    def test_published_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr, c.momentum, c.pretrain_epochs, c.eval_epochs, c.k_ratio) == (
            128, 1e-4, 0.9, 100, 50, 0.4)
        assert c.k == 51 and c.train_fraction == 0.9 and len(c.seeds) == 5


class TestDownstream:
    def test_separable_representations(self):
        rng = np.random.default_rng(0)
        y = np.arange(5).repeat(20)
        centers = rng.normal(scale=5.0, size=(5, 64))
        h = centers[y] + rng.normal(size=(100, 64))
        clf = train_classifier(h, y, TINY, seed=0)
        acc = compute_metrics(predict(h @ clf["w"].T + clf["b"]), y).accuracy
        assert acc > 0.2

    def test_linear_eval_freezes_encoder_and_ignores_projection(self, small_data):
        _, train, test = small_data
        params = pretrain(train.unlabeled(), TINY, seed=0).params
        before = params.encoder_checksum()
        m1 = linear_eval(params, train, test, TINY, seed=0)
        assert params.encoder_checksum() == before
        for v in params.projection.values():
            v[...] = np.nan
        m2 = linear_eval(params, train, test, TINY, seed=0)
        assert m1.to_dict() == m2.to_dict()

    def test_leakage(self, small_data):
        ds, train, _ = small_data
        with pytest.raises(LeakageError):
            linear_eval(init_params(seed=0), train, ds, TINY)
        with pytest.raises(LeakageError):
            finetune(init_params(seed=0), train, ds, 1, TINY)
        with pytest.raises(LeakageError):
            knn_prior_baseline(train, ds)

    def test_recording_selection(self, small_data):
        _, train, _ = small_data
        assert select_recordings(train, None, 0) is train
        assert select_recordings(train, len(train.recordings()), 0) is train
        one = select_recordings(train, 1, 0)
        assert len(one.recordings()) == 1
        assert select_recordings(train, 1, 0).recordings() == one.recordings()
        with pytest.raises(ConfigError):
            select_recordings(train, 99, 0)

    def test_finetune_all_equals_supervised_data(self, small_data):
        _, train, test = small_data
        a = supervised(train, test, None, TINY, seed=1)
        b = finetune(init_params(seed=1), train, test, len(train.recordings()), TINY, seed=1)
        assert a.to_dict() == b.to_dict()

    def test_finetune_deterministic(self, small_data):
        _, train, test = small_data
        params = init_params(seed=2)
        assert finetune(params, train, test, 1, TINY, 3).to_dict() == finetune(params, train, test, 1, TINY,
                                                                                  3).to_dict()

    def test_perfect_predictor(self, small_data):
        labels = small_data[2].labels()
        m = compute_metrics(predict(np.eye(5)[labels]), labels)
        assert m.accuracy == 1.0 and m.macro_f1 == 1.0


def test_rng_streams_independent():
    a = make_rng(0, 0).random(4)
    assert not np.array_equal(a, make_rng(0, 1).random(4))
    assert np.array_equal(a, make_rng(0, 0).random(4))


def test_dataset_type():
    assert isinstance(synth_dataset(1), Dataset) and EncoderConfig().rep_dim == 64
