import numpy as np
import pytest

from priorcl.prior_features import prior_features
from priorcl.signal_data import (AugmentConfig, CacheFormatError, Dataset, Epoch, SleepStage, augment,
                                 augment_batch, augment_samples, dataset_from_bytes, dataset_to_bytes,
                                 samples_per_epoch, split_by_subject, synth_dataset, synth_epoch, two_views)

IDENTITY = AugmentConfig(mask_fraction=0.0, scale_low=1.0, scale_high=1.0)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestEpoch:
    @pytest.mark.parametrize("rate,n", [(100.0, 3000), (256.0, 7680), (128.0, 3840)])
    def test_length_rule(self, rate, n):
        assert samples_per_epoch(rate) == n
        Epoch(np.zeros(n), rate)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="3000"):
            Epoch(np.zeros(2999), 100.0)

    def test_label_coerced(self):
        assert Epoch(np.zeros(3000), 100.0, 3).label is SleepStage.N3

    def test_mixed_rates_rejected(self):
        with pytest.raises(ValueError, match="mixed"):
            Dataset([Epoch(np.zeros(3000), 100.0), Epoch(np.zeros(7680), 256.0, source_id=1)])


class TestAugment:
    def test_identity_config(self):
        x = rng().normal(size=3000)
        assert np.array_equal(augment_samples(x, IDENTITY, rng(1)), x)
        a, b = two_views(Epoch(x, 100.0), IDENTITY, rng(2))
        assert np.array_equal(a.samples, x) and np.array_equal(b.samples, x)

    @pytest.mark.parametrize("n", [3000, 3001, 7680])
    def test_mask_count(self, n):
        out = augment_samples(np.ones(n), AugmentConfig(mask_fraction=0.5, scale_low=1.0, scale_high=1.0), rng(3))
        assert np.sum(out == 0.0) == round(0.5 * n)
        assert np.all((out == 0.0) | (out == 1.0))
        zeros = np.flatnonzero(out == 0.0)
        assert zeros[-1] - zeros[0] + 1 == zeros.size  # one contiguous segment

    def test_scale_range(self):
        cfg = AugmentConfig(mask_fraction=0.0, scale_low=0.8, scale_high=1.2)
        for seed in range(50):
            factor = augment_samples(np.ones(10), cfg, rng(seed))[0]
            assert 0.8 <= factor <= 1.2

    def test_seeded(self):
        x = rng().normal(size=3000)
        assert np.array_equal(augment_samples(x, AugmentConfig(), rng(7)), augment_samples(x, AugmentConfig(), rng(7)))
        differ = sum(not np.array_equal(augment_samples(x, AugmentConfig(), rng(s)),
                                        augment_samples(x, AugmentConfig(), rng(s + 1000))) for s in range(100))
        assert differ == 100

    def test_views_keep_metadata(self):
        e = Epoch(rng().normal(size=3000), 100.0, SleepStage.N2, source_id=4, index_in_recording=17)
        a, b = two_views(e, AugmentConfig(), rng(1))
        for v in (a, b):
            assert (v.index_in_recording, v.source_id, v.label) == (17, 4, SleepStage.N2)
        assert augment(e, AugmentConfig(), rng(2)).index_in_recording == 17

    def test_batch_interleaving(self):
        x = rng().normal(size=(6, 3000))
        views = augment_batch(x, IDENTITY, rng(1))
        assert views.shape == (12, 3000)
        for i in range(6):
            assert np.array_equal(views[2 * i], x[i]) and np.array_equal(views[2 * i + 1], x[i])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(mask_fraction=1.0)
        with pytest.raises(ValueError):
            AugmentConfig(scale_low=1.5, scale_high=1.0)


def band_shares(epoch):
    e = prior_features(epoch.samples, epoch.sample_rate_hz)[0]
    return e / e.sum()


class TestSynthetic:
    def test_counts(self):
        ds = synth_dataset(10, subjects=5)
        assert len(ds) == 50
        assert np.bincount(ds.labels(), minlength=5).tolist() == [10] * 5

    def test_deterministic(self):
        a, b = synth_dataset(4, seed=9), synth_dataset(4, seed=9)
        assert dataset_to_bytes(a) == dataset_to_bytes(b)
        assert dataset_to_bytes(a) != dataset_to_bytes(synth_dataset(4, seed=10))

    def test_n3_is_delta(self):
        for seed in range(10):
            assert band_shares(synth_epoch(SleepStage.N3, 100.0, rng(seed)))[0] >= 0.8

    def test_wake_is_alpha_beta(self):
        for seed in range(10):
            s = band_shares(synth_epoch(SleepStage.W, 100.0, rng(seed)))
            assert s[2] + s[3] > 0.5 and s[2] + s[3] > max(s[0], s[1])

    def test_noiseless_n2_is_theta(self):
        s = band_shares(synth_epoch(SleepStage.N2, 100.0, rng(1), noise_scale=0.0))
        assert 1.0 - s[1] < 0.01

    def test_classes_separate_in_feature_space(self):
        ds = synth_dataset(20, seed=3)
        f = np.log(prior_features(ds.samples(), ds.sample_rate_hz))
        y = ds.labels()
        d = np.linalg.norm(f[:, None] - f[None], axis=2)
        same = (y[:, None] == y[None]) & ~np.eye(len(y), dtype=bool)
        diff = y[:, None] != y[None]
        assert d[diff].mean() > d[same].mean()

    def test_subjects_get_every_stage(self):
        ds = synth_dataset(20, subjects=10)
        for s in range(10):
            labels = ds.labels()[ds.subject_ids() == s]
            assert sorted(set(labels.tolist())) == [0, 1, 2, 3, 4]

    def test_low_rate_rejected(self):
        with pytest.raises(ValueError, match="Nyquist|below"):
            synth_epoch(SleepStage.W, 50.0, rng())


class TestSplit:
    def test_subject_disjoint(self):
        ds = synth_dataset(20, subjects=10)
        tr, te = split_by_subject(ds, 0.9, 0)
        assert not set(tr.subject_ids().tolist()) & set(te.subject_ids().tolist())
        assert len(tr) + len(te) == len(ds)
        assert len(set(te.subject_ids().tolist())) == 1

    def test_seed_changes_split(self):
        ds = synth_dataset(20, subjects=10)
        tests = {tuple(sorted(set(split_by_subject(ds, 0.8, s)[1].subject_ids().tolist()))) for s in range(5)}
        assert len(tests) > 1

    def test_single_subject_rejected(self):
        with pytest.raises(ValueError):
            split_by_subject(synth_dataset(2, subjects=1), 0.5, 0)


class TestCache:
    def test_round_trip(self):
        ds = synth_dataset(3, subjects=2)
        ds = Dataset([Epoch(e.samples, e.sample_rate_hz, None if i == 2 else e.label, e.source_id,
                            e.index_in_recording) for i, e in enumerate(ds.epochs)], {0: 10, 1: 11})
        back = dataset_from_bytes(dataset_to_bytes(ds))
        assert back.labels().tolist() == ds.labels().tolist()
        assert back.subject_ids().tolist() == ds.subject_ids().tolist()
        assert np.array_equal(back.samples(), ds.samples())
        assert [e.index_in_recording for e in back.epochs] == [e.index_in_recording for e in ds.epochs]

    @pytest.mark.parametrize("blob", [b"", b"XXXX" + bytes(16), dataset_to_bytes(synth_dataset(1))[:-1]])
    def test_corrupt_rejected(self, blob):
        with pytest.raises(CacheFormatError):
            dataset_from_bytes(blob)
