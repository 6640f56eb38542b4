import csv

import numpy as np
import pytest

from midol import synthdata as sd


def specs(seed=0, **kw):
    return sd.make_modalities(np.random.default_rng(seed), **kw)


class TestModalities:
    def test_centers_exactly_spaced(self):
        s = specs()
        for a in range(3):
            for b in range(a + 1, 3):
                assert np.linalg.norm(s[a].center - s[b].center) == pytest.approx(10.0, abs=1e-12)

    def test_subclusters_on_radius(self):
        for s in specs(1):
            np.testing.assert_allclose(np.linalg.norm(s.sub_centers - s.center, axis=1), 1.5, atol=1e-12)

    def test_non_power_of_two_dim(self):
        s = specs(2, dim=12)
        for a in range(3):
            for b in range(a + 1, 3):
                assert np.linalg.norm(s[a].center - s[b].center) >= 10.0 - 1e-12

    def test_spacing_guard(self):
        with pytest.raises(ValueError):
            specs(spacing=7.0)


class TestSampleBatch:
    def test_degenerate_geometry(self):
        s = specs(r_sub=0.0, sigma_in=0.0)
        b = sd.sample_batch(s, 6, 4, rng=1)
        for i in range(6):
            np.testing.assert_array_equal(b.features[i], s[b.modality[i]].center)

    def test_balance(self):
        b = sd.sample_batch(specs(), 12, 8, rng=2)
        np.testing.assert_array_equal(np.bincount(b.modality), [4, 4, 4])
        assert b.views.shape == (12, 8, 32)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            sd.sample_batch(specs(), 10, 8, rng=0)

    def test_replay_identical(self):
        a = sd.sample_batch(specs(), 12, 8, rng=3)
        b = sd.sample_batch(specs(), 12, 8, rng=3)
        assert a.views.tobytes() == b.views.tobytes()
        assert a.features.tobytes() == b.features.tobytes()

    def test_view_kinds(self):
        b = sd.sample_batch(specs(), 30, 8, rng=4, sigma_aug=0.0)
        zeros = (b.views == 0).sum(axis=2)
        assert np.all(zeros[:, :2] == 0)
        assert np.all(zeros[:, 2:] > 0)

    def test_shuffled(self):
        b = sd.sample_batch(specs(), 60, 2, rng=5)
        assert not np.all(np.diff(b.modality) >= 0)

    def test_nearest_center_exact(self):
        s = specs(6)
        x, mod, _ = sd.sample_raw(s, 1000, np.random.default_rng(6))
        centers = np.stack([t.center for t in s])
        pred = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(pred, mod)

    def test_fine_labels(self):
        b = sd.sample_batch(specs(), 12, 2, rng=7)
        np.testing.assert_array_equal(b.fine_labels(4), b.modality * 4 + b.subcluster)


class TestAugment:
    def test_global_no_noise_identity(self):
        x = np.random.default_rng(0).standard_normal(32)
        np.testing.assert_array_equal(sd.augment_view(x, sd.GLOBAL, np.random.default_rng(1), sigma_aug=0.0), x)

    def test_local_full_keep_matches_global(self):
        x = np.random.default_rng(0).standard_normal(32)
        g = sd.augment_view(x, sd.GLOBAL, np.random.default_rng(2))
        loc = sd.augment_view(x, sd.LOCAL, np.random.default_rng(2), keep_fraction=1.0)
        np.testing.assert_array_equal(g, loc)

    def test_local_fraction_and_replay(self):
        x = np.ones(32)
        for seed in range(50):
            a = sd.augment_view(x, sd.LOCAL, np.random.default_rng(seed), sigma_aug=0.0)
            b = sd.augment_view(x, sd.LOCAL, np.random.default_rng(seed), sigma_aug=0.0)
            np.testing.assert_array_equal(a, b)
            assert 0.3 <= (a != 0).mean() <= 0.6
            assert set(np.unique(a)) <= {0.0, 1.0}

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sd.augment_view(np.zeros(3), "crop", np.random.default_rng(0))

    def test_views_stay_with_own_modality(self):
        s = specs(8)
        centers = np.stack([t.center for t in s])
        rng = np.random.default_rng(8)
        b = sd.sample_batch(s, 12_501, 8, rng=rng)
        v = b.flat_views()
        own = np.repeat(b.modality, 8)
        d = ((v[:, None, :] - centers[None]) ** 2).sum(-1)
        assert v.shape[0] >= 100_000
        assert np.mean(np.argmin(d, axis=1) == own) > 0.999


class TestDump:
    def test_csv_round_trip(self, tmp_path):
        b = sd.sample_batch(specs(), 6, 2, rng=9)
        path = sd.dump_data(tmp_path / "d.csv", b)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["sample_id", "modality", "subcluster"] and len(rows[0]) == 35
        got = np.array([[float(v) for v in r[3:]] for r in rows[1:]])
        np.testing.assert_array_equal(got, b.features)
