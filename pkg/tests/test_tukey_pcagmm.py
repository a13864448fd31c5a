import numpy as np
import pytest

from roamwatch.detectors.pcagmm import PcaGmmDetector
from roamwatch.detectors.tukey import TukeyDetector


class TestTukey:
    def test_fences_on_1_to_100(self):
        X = np.arange(1.0, 101.0).reshape(-1, 1)
        t = TukeyDetector.fit(X)
        # type-7 quartiles of 1..100
        assert np.quantile(X[:, 0], 0.75) == pytest.approx(75.25)
        assert t.upper[0] == pytest.approx(149.5)
        assert t.lower[0] == pytest.approx(25.75 - 1.5 * 49.5)

    def test_point_outside_upper_fence(self):
        X = np.column_stack([np.arange(1.0, 101.0)] * 3)
        t = TukeyDetector.fit(X)
        score = t.scores(np.array([[50.0, 50.0, 1000.0]]))[0]
        assert score == pytest.approx(1 / 3)

    def test_inside_all_fences_scores_zero(self):
        X = np.random.default_rng(0).normal(size=(100, 4))
        t = TukeyDetector.fit(X)
        assert t.scores(np.zeros((1, 4)))[0] == 0.0

    def test_all_features_extreme_scores_one(self):
        X = np.random.default_rng(1).normal(size=(100, 4))
        t = TukeyDetector.fit(X)
        assert t.scores(np.full((1, 4), 1e6))[0] == 1.0

    def test_needs_four_points(self):
        with pytest.raises(ValueError):
            TukeyDetector.fit(np.zeros((3, 2)))

    def test_round_trip(self):
        X = np.random.default_rng(2).normal(size=(60, 5))
        t = TukeyDetector.fit(X)
        again = TukeyDetector.from_dict(t.to_dict())
        pts = np.random.default_rng(3).normal(size=(10, 5)) * 4
        assert np.array_equal(again.scores(pts), t.scores(pts))


class TestPcaGmm:
    def test_line_data_one_component(self):
        t = np.linspace(-5, 5, 200)
        X = np.column_stack([t, 2.0 * t])  # exactly rank 1
        m = PcaGmmDetector.fit(X, seed=0)
        assert m.components.shape[0] == 1
        assert m.explained_variance == pytest.approx(1.0)

    def test_eigenvalue_spectrum_rotation_invariant(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(300, 2)) @ np.diag([3.0, 0.5])
        theta = 0.7
        R = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        a = PcaGmmDetector.fit(X, variance_target=0.999, seed=0)
        b = PcaGmmDetector.fit(X @ R, variance_target=0.999, seed=0)
        assert np.allclose(a.eigenvalues, b.eigenvalues, rtol=1e-8)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 6)) * np.array([5, 3, 2, 1, 0.5, 0.1])
        m = PcaGmmDetector.fit(X, seed=0)
        gram = m.components @ m.components.T
        assert np.allclose(gram, np.eye(len(gram)), atol=1e-9)

    def test_retained_variance_meets_target(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(400, 10)) * np.linspace(4, 0.1, 10)
        m = PcaGmmDetector.fit(X, variance_target=0.95, seed=0)
        assert m.explained_variance >= 0.95
        assert m.components.shape[0] < 10

    def test_far_outlier_in_bottom_likelihood_tail(self):
        rng = np.random.default_rng(3)
        X = np.vstack(
            [
                rng.normal(0, 1, size=(100, 3)),
                rng.normal(8, 1, size=(100, 3)),
                np.full((1, 3), 60.0),
            ]
        )
        m = PcaGmmDetector.fit(X, seed=0)
        s = m.scores(X)
        cutoff = np.quantile(s, 0.95)
        assert s[-1] > cutoff  # in the top-5% of anomaly scores

    def test_scores_deterministic(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(150, 4))
        m = PcaGmmDetector.fit(X, seed=0)
        assert np.array_equal(m.scores(X), m.scores(X))

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(150, 4)) * np.array([3, 2, 1, 0.2])
        m = PcaGmmDetector.fit(X, seed=0)
        again = PcaGmmDetector.from_dict(m.to_dict())
        assert np.allclose(again.scores(X), m.scores(X))

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            PcaGmmDetector.fit(np.ones((50, 3)), seed=0)
