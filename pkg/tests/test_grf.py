"""Stationary Matern random field sampling."""

import numpy as np
import pytest

from repap.fields import Grid2D
from repap.grf import matern25_correlation, sample_matern_grf


class TestCorrelation:
    def test_unit_at_zero(self):
        assert matern25_correlation(np.array(0.0), ell=0.1) == 1.0

    def test_value_at_correlation_length(self):
        # (1 + sqrt(5) + 5/3) exp(-sqrt(5)), independent closed form
        got = matern25_correlation(np.array(0.1), ell=0.1)
        assert got == pytest.approx(5.23994108831820293e-01, rel=1e-14)

    def test_monotone_decreasing(self):
        r = np.linspace(0.0, 1.0, 200)
        c = matern25_correlation(r, ell=0.2)
        assert np.all(np.diff(c) < 0)

    def test_scale_invariance(self):
        # correlation depends only on r / ell
        a = matern25_correlation(np.array(0.3), ell=0.1)
        b = matern25_correlation(np.array(3.0), ell=1.0)
        assert a == pytest.approx(b, rel=1e-14)


class TestSampler:
    def test_shape_and_determinism(self):
        g = Grid2D.unit(16)
        a = sample_matern_grf(g, ell=0.2, seed=3, n_samples=3)
        b = sample_matern_grf(g, ell=0.2, seed=3, n_samples=3)
        assert a.shape == (3, 16, 16)
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_draw(self):
        g = Grid2D.unit(16)
        a = sample_matern_grf(g, ell=0.2, seed=3)
        b = sample_matern_grf(g, ell=0.2, seed=4)
        assert not np.allclose(a, b)

    def test_moments(self):
        g = Grid2D.unit(24)
        fields = sample_matern_grf(g, ell=0.1, seed=0, n_samples=200)
        assert abs(fields.mean()) < 0.05
        assert fields.var() == pytest.approx(1.0, abs=0.1)

    def test_neighbor_correlation_close_to_model(self):
        g = Grid2D.unit(24)
        fields = sample_matern_grf(g, ell=0.3, seed=1, n_samples=400)
        emp = np.mean(fields[:, :, :-1] * fields[:, :, 1:])
        want = matern25_correlation(np.array(g.h), ell=0.3)
        assert emp == pytest.approx(float(want), abs=0.08)

    def test_methods_agree_in_law(self):
        g = Grid2D.unit(8)
        circ = sample_matern_grf(g, ell=0.2, seed=0, n_samples=400, method="circulant")
        dense = sample_matern_grf(g, ell=0.2, seed=0, n_samples=400, method="dense")
        assert circ.var() == pytest.approx(dense.var(), abs=0.12)

    def test_rejects_bad_args(self):
        g = Grid2D.unit(8)
        with pytest.raises(ValueError):
            sample_matern_grf(g, ell=0.0)
        with pytest.raises(ValueError):
            sample_matern_grf(g, ell=0.1, n_samples=0)
        with pytest.raises(ValueError):
            sample_matern_grf(g, ell=0.1, method="nope")
