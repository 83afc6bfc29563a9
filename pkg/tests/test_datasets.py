import numpy as np
import pytest

from ntkmoe.datasets import (TOY_TEST_RANGE, gen_cluster_classification,
                             gen_teacher_regression, gen_toy1d_gap, toy_function)
from ntkmoe.nn import MlpSpec, forward_batch, init_mlp


class TestToy:
    def test_noise_free_on_curve(self):
        train, _ = gen_toy1d_gap(100, seed=0, noise=0.0)
        np.testing.assert_array_equal(train.Y[:, 0], toy_function(train.X[:, 0]))

    def test_gap_empty(self):
        train, _ = gen_toy1d_gap(2000, seed=1, gap=(2.5, 3.5))
        x = train.X[:, 0]
        assert not np.any((x > 2.5) & (x < 3.5))
        assert x.min() >= 0.0 and x.max() <= 6.0

    def test_uniform_outside_gap(self):
        x = gen_toy1d_gap(20000, seed=2)[0].X[:, 0]
        # [0,2) and (4,6] have equal length so they get about half the points each
        assert abs(np.mean(x < 2) - 0.5) < 0.02

    def test_deterministic(self):
        a, b = gen_toy1d_gap(50, seed=3), gen_toy1d_gap(50, seed=3)
        np.testing.assert_array_equal(a[0].X, b[0].X)
        np.testing.assert_array_equal(a[0].Y, b[0].Y)

    def test_test_grid(self):
        _, test = gen_toy1d_gap(10, seed=0)
        x = test.X[:, 0]
        assert (x[0], x[-1]) == TOY_TEST_RANGE
        assert np.all(np.diff(x) > 0)
        assert np.any((x > 2) & (x < 4)) and np.any(x < 0) and np.any(x > 6)

    def test_noise_level(self):
        train, _ = gen_toy1d_gap(20000, seed=4, noise=0.3)
        resid = train.Y[:, 0] - toy_function(train.X[:, 0])
        assert abs(resid.std() - 0.3) < 0.01

    @pytest.mark.parametrize("kw", [{"gap": (4.0, 2.0)}, {"gap": (-1.0, 2.0)},
                                    {"noise": -0.1}, {"n": 0}])
    def test_invalid(self, kw):
        args = {"n": 10, **kw}
        with pytest.raises(ValueError):
            gen_toy1d_gap(**args)


class TestTeacher:
    def test_shapes(self):
        d = gen_teacher_regression(4, 3, 25, seed=0)
        assert d.X.shape == (25, 4) and d.Y.shape == (25, 3)

    def test_same_teacher_same_function(self):
        # two sample draws from one teacher agree on the outputs of a shared input
        a = gen_teacher_regression(3, 2, 50, noise=0.0, seed=0, teacher_seed=3)
        b = gen_teacher_regression(3, 2, 50, noise=0.0, seed=1, teacher_seed=3)
        teacher = init_mlp(MlpSpec((3, 32, 2), "tanh"), 3)
        teacher = type(teacher)(2.0 * teacher.theta, teacher.spec)
        for d in (a, b):
            np.testing.assert_allclose(d.Y, forward_batch(teacher, d.X), rtol=1e-14)

    def test_teacher_independent_of_samples(self):
        a = gen_teacher_regression(5, 1, 100, noise=0.0, seed=0, teacher_seed=7)
        b = gen_teacher_regression(5, 1, 100, noise=0.0, seed=1, teacher_seed=7)
        c = gen_teacher_regression(5, 1, 100, noise=0.0, seed=0, teacher_seed=8)
        np.testing.assert_array_equal(a.X, c.X)
        assert not np.array_equal(a.Y, c.Y)
        assert not np.array_equal(a.X, b.X)

    def test_signal_exceeds_noise(self):
        d = gen_teacher_regression(10, 1, 4000, noise=0.1, seed=0)
        assert d.Y.var() > 0.1 ** 2

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_teacher_regression(0, 1, 10)
        with pytest.raises(ValueError):
            gen_teacher_regression(2, 1, 10, noise=-1.0)


class TestClassification:
    def test_one_hot_labels(self):
        train, test, _ = gen_cluster_classification(4, 100, seed=0)
        for d in (train, test):
            assert set(np.unique(d.Y)) <= {0.0, 1.0}
            np.testing.assert_array_equal(d.Y.sum(axis=1), 1.0)

    def test_centre_spacing(self):
        train, _, _ = gen_cluster_classification(5, 10, separation=3.0, seed=0)
        C = np.array(train.meta["centres"])
        d = np.linalg.norm(C - np.roll(C, 1, axis=0), axis=1)
        np.testing.assert_allclose(d, 3.0)

    def test_ood_far_from_centres(self):
        for sep in (2.0, 4.0, 7.0):
            train, _, ood = gen_cluster_classification(3, 200, separation=sep, seed=1)
            C = np.array(train.meta["centres"])
            dist = np.linalg.norm(ood.X[:, None, :] - C[None], axis=2)
            assert dist.min() >= 3 * sep

    def test_well_separated_nearest_neighbour(self):
        train, test, _ = gen_cluster_classification(3, 200, separation=12.0, seed=2)
        d = np.linalg.norm(test.X[:, None, :] - train.X[None], axis=2)
        pred = train.Y[d.argmin(axis=1)].argmax(1)
        assert np.all(pred == test.Y.argmax(1))

    def test_deterministic(self):
        a = gen_cluster_classification(3, 30, seed=5)
        b = gen_cluster_classification(3, 30, seed=5)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.X, db.X)

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_cluster_classification(1, 10)
