import numpy as np
import pytest
from oracles import random_panel

from fsynth.errors import DimensionError, ValidationError
from fsynth.estimator import (
    FitConfig,
    basis_for,
    default_K,
    effects,
    fit_weights,
    predict,
    predict_all,
)
from fsynth.hilbert import Grid
from fsynth.spaces import CompositionAdapter, L2Adapter, SpdAdapter, WassersteinAdapter, distance
from fsynth.weights import Panel, WeightVector, fit_scm


def quantile_panel(rng, N, T, T0, n=40):
    ad = WassersteinAdapter.on_quantile_grid(n)
    y = np.sort(rng.normal(size=(N, T, n)), axis=-1) * rng.uniform(0.5, 2, size=(N, T, 1))
    return Panel(y, ad.grid, T0), ad


class TestFitConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            FitConfig(estimator="gsc")
        with pytest.raises(ValidationError):
            FitConfig(lam=0.0)
        with pytest.raises(ValidationError):
            FitConfig(K=0)
        assert FitConfig(lambda_grid=[1, 2]).lambda_grid == (1.0, 2.0)

    def test_default_K(self):
        assert default_K("bspline_cubic", 100) == 50
        assert default_K("bspline_cubic", 44) == 22
        assert default_K("bspline_cubic", 50) == 25
        assert default_K("fourier", 20) == 20
        assert default_K("standard", 81) == 81

    def test_basis_for(self, rng):
        p = random_panel(rng, 4, 3, 2, Grid.uniform(30))
        assert basis_for(p, FitConfig()).K == 15
        assert basis_for(p, FitConfig(basis="fourier", K=7)).K == 7

    def test_tiny_grid_uses_coordinate_basis(self, rng):
        p = random_panel(rng, 3, 3, 2, Grid.index(2))
        b = basis_for(p, FitConfig())
        assert b.kind == "standard" and b.K == 2


class TestFitWeights:
    def test_fsc(self, rng):
        p = random_panel(rng, 6, 5, 4, Grid.uniform(10))
        res = fit_weights(p, FitConfig())
        np.testing.assert_array_equal(res.weights.weights, fit_scm(p).weights)
        assert res.lam is None

    def test_afsc_fixed_and_cv(self, rng):
        p = random_panel(rng, 8, 6, 5, Grid.uniform(10))
        fixed = fit_weights(p, FitConfig("afsc", lam=0.5, basis="fourier", K=5))
        assert fixed.lam == 0.5 and fixed.cv is None
        cv = fit_weights(p, FitConfig("afsc", lambda_grid=(0.1, 1.0, 10.0), basis="fourier", K=5))
        assert cv.lam in (0.1, 1.0, 10.0)
        scaled = fit_weights(p, FitConfig("afsc", lambda_grid=(0.1, 1.0, 10.0), lambda_scale=100,
                                          basis="fourier", K=5))
        assert scaled.lam == pytest.approx(100 * cv.lam)
        assert fit_weights(p, FitConfig("afsc", lam=0.5, basis="fourier", K=5), lam=2.0).lam == 2.0

    def test_huge_lambda_equals_fsc(self, rng):
        p = random_panel(rng, 8, 6, 5, Grid.uniform(10))
        res = fit_weights(p, FitConfig("afsc", lam=1e12, basis="fourier", K=5))
        assert np.max(np.abs(res.weights.weights - res.gamma_scm.weights)) <= 1e-6

    def test_covariates(self, rng):
        p = random_panel(rng, 10, 5, 4, Grid.uniform(6), p=2)
        res = fit_weights(p, FitConfig("afsc", lam=1.0, basis="fourier", K=3,
                                       use_covariates=True))
        z = p.covariates
        assert np.linalg.norm(z[0] - res.weights.weights @ z[1:]) <= 1e-8
        with pytest.raises(ValidationError):
            fit_weights(random_panel(rng, 5, 4, 3, Grid.uniform(4)),
                        FitConfig(use_covariates=True))


class TestPredict:
    def test_single_control(self, rng):
        p = random_panel(rng, 2, 4, 2, Grid.uniform(5))
        est = predict(p, WeightVector([1.0], "simplex"), t=3)
        np.testing.assert_array_equal(est.raw.values, p.outcomes[1, 2])
        np.testing.assert_array_equal(est.object, p.outcomes[1, 2])

    def test_simplex_weights_on_quantiles_need_no_projection(self, rng):
        p, ad = quantile_panel(rng, 8, 5, 3)
        w = fit_scm(p)
        for t in (4, 5):
            est = predict(p, w, ad, t)
            assert np.max(np.abs(est.raw.values - est.projected.values)) <= 1e-10

    def test_simplex_weights_on_spd_stay_psd(self, rng):
        m = 3
        a = rng.normal(size=(6, 4, m, m))
        y = np.einsum("ntij,ntkj->ntik", a, a).reshape(6, 4, m * m)
        ad = SpdAdapter(m)
        p = Panel(y, ad.grid, 3)
        est = predict(p, fit_scm(p), ad, 4)
        assert np.max(np.abs(est.raw.values - est.projected.values)) <= 1e-10

    def test_rearrangement_moves_toward_truth(self, rng):
        ad = WassersteinAdapter.on_quantile_grid(40)
        truth = np.sort(rng.normal(size=40))
        hits = 0
        for _ in range(50):
            controls = np.sort(truth + rng.normal(scale=0.5, size=(4, 40)), axis=1)
            y = np.zeros((5, 2, 40))
            y[1:, 1] = controls
            y[1:, 0] = controls
            y[0] = truth
            p = Panel(y, ad.grid, 1)
            w = WeightVector([2.0, -1.5, 1.0, -0.5], "sum_to_one")
            est = predict(p, w, ad, 2)
            np.testing.assert_array_equal(est.projected.values, np.sort(est.raw.values))
            g = ad.grid
            assert g.norm(truth - est.projected.values) <= g.norm(truth - est.raw.values) + 1e-12
            hits += np.any(np.diff(est.raw.values) < 0)
        assert hits > 0

    def test_pre_period_rejected(self, rng):
        p = random_panel(rng, 3, 4, 2, Grid.uniform(5))
        with pytest.raises(ValidationError):
            predict(p, [0.5, 0.5], t=2)
        with pytest.raises(ValidationError):
            predict(p, [0.5, 0.5], t=5)
        with pytest.raises(DimensionError):
            predict(p, [1.0], t=3)

    def test_adapter_grid_must_match(self, rng):
        p = random_panel(rng, 3, 4, 2, Grid.uniform(5))
        with pytest.raises(DimensionError):
            predict(p, [0.5, 0.5], L2Adapter(Grid.uniform(6)), 3)

    def test_weighted_frechet_mean_on_the_line(self, rng):
        # on R, argmin_y sum_i g_i (y - Y_i)^2 over a dense candidate grid is the lincomb
        for _ in range(10):
            y = rng.normal(size=(5, 2, 1))
            p = Panel(y, Grid.index(1), 1)
            g = rng.dirichlet(np.ones(4))
            cand = np.linspace(-5, 5, 100001)
            obj = ((cand[:, None] - y[1:, 1, 0][None, :]) ** 2) @ g
            est = predict(p, WeightVector(g, "simplex"), t=2)
            assert abs(cand[np.argmin(obj)] - est.raw.values[0]) <= 1e-4

    def test_predict_all(self, rng):
        p = random_panel(rng, 4, 6, 3, Grid.uniform(5))
        out = predict_all(p, fit_scm(p))
        assert [e.t for e in out] == [4, 5, 6]


class TestEffects:
    def test_zero_effect(self, rng):
        p = random_panel(rng, 3, 3, 2, Grid.uniform(5))
        y = p.outcomes.copy()
        y[0, 2] = y[1, 2]
        p = Panel(y, p.grid, 2)
        ser = effects(p, [predict(p, [1.0, 0.0], t=3)])
        assert ser.magnitudes[0] == 0.0
        np.testing.assert_array_equal(ser.differences[0].values, 0.0)

    def test_constant_shift(self, rng):
        g = Grid.index(4)
        y = rng.normal(size=(2, 2, 4))
        y[0, 1] = y[1, 1] + 1.5
        p = Panel(y, g, 1)
        ser = effects(p, [predict(p, [1.0], t=2)])
        assert ser.magnitudes[0] == pytest.approx(1.5 * 2.0, abs=1e-12)

    def test_magnitude_is_metric_distance(self, rng):
        ad = CompositionAdapter(4)
        x = rng.dirichlet(np.ones(4), size=(5, 3))
        y = np.log(x)
        y -= y.mean(axis=-1, keepdims=True)
        p = Panel(y, ad.grid, 2)
        est = predict(p, fit_scm(p), ad, 3)
        ser = effects(p, [est], ad)
        ref = distance(ad, x[0, 2], est.object)
        assert abs(ser.magnitudes[0] - ref) <= 1e-10
        assert abs(ser.magnitudes[0] - p.grid.norm(ser.differences[0].values)) <= 1e-10

    def test_geodesic_sampler(self, rng):
        p, ad = quantile_panel(rng, 6, 4, 3)
        est = predict(p, fit_scm(p), ad, 4)
        ser = effects(p, [est], ad)
        mid = ser.sample(4, 0.5)
        np.testing.assert_allclose(mid, 0.5 * (est.object + p.outcomes[0, 3]), atol=1e-12)
        np.testing.assert_allclose(ser.sample(4, 0.0), est.object, atol=1e-12)

    def test_missing_periods(self, rng):
        p = random_panel(rng, 3, 5, 2, Grid.uniform(5))
        with pytest.raises(ValidationError):
            effects(p, [predict(p, [0.5, 0.5], t=3)])
