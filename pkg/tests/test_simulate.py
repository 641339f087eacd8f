import math
from dataclasses import replace

import numpy as np
import pytest

import fsynth.simulate as sim
from fsynth.errors import SolverError, ValidationError
from fsynth.hilbert import Grid, HilbertElement, build_basis
from fsynth.simulate import (
    ArConfig,
    FactorConfig,
    SimInstance,
    agsc_estimate,
    apply_kernels,
    draw_noise,
    estimate,
    evaluate_bound_auto,
    evaluate_bound_factor,
    factor_constants,
    fit_pre_period,
    gen_autoregressive,
    gen_latent_factor,
    kernel_norm,
    noise_bound,
    run_monte_carlo,
    with_noise,
)
from fsynth.weights import Panel, fit_scm


class TestConfigs:
    def test_defaults(self):
        c = ArConfig()
        assert (c.N, c.T, c.T0, c.C) == (50, 10, 9, 0.05)
        assert c.lag_coefs == (0.6, 0.3, 0.1)
        f = FactorConfig()
        assert (f.N, f.T, f.T0, f.J, f.C) == (50, 10, 9, 5, 0.02)

    def test_validation(self):
        with pytest.raises(ValidationError):
            ArConfig(T=8)
        with pytest.raises(ValidationError):
            ArConfig(T0=2, T=3)
        with pytest.raises(ValidationError):
            FactorConfig(factors="sine")
        assert with_noise(ArConfig(), 1.0).C == 1.0


class TestAutoregressive:
    def test_noiseless_post_is_kernel_regression(self):
        inst = gen_autoregressive(ArConfig(N=6, C=0.0), 0)
        p = inst.panel
        ref = apply_kernels(inst.internals["beta"], p.outcomes[:, :9], p.grid)
        np.testing.assert_allclose(p.outcomes[:, 9], ref, atol=1e-15)

    def test_kernel_regression_by_loops(self):
        cfg = ArConfig(N=2, C=0.0, grid_size=12)
        inst = gen_autoregressive(cfg, 0)
        g = inst.panel.grid
        x = g.points
        y = inst.panel.outcomes
        for xi in range(12):
            total = 0.0
            for lag, c in enumerate(cfg.lag_coefs):
                t = 8 - lag
                for yi in range(12):
                    dens = math.exp(-0.5 * ((x[yi] - x[xi]) / 0.1) ** 2) / (0.1 * math.sqrt(2 * math.pi))
                    total += g.quad_weights[yi] * c * dens * y[0, t, yi]
            assert y[0, 9, xi] == pytest.approx(total, abs=1e-14)

    def test_pre_period_expansion_bounds(self):
        inst = gen_autoregressive(ArConfig(N=10), 0)
        pre = inst.panel.outcomes[:, :9]
        l = np.arange(1, 11)
        bound = np.sqrt(3) / 100 * (1 + np.sqrt(2) * np.sum(l[1:] ** -1.2))
        assert np.abs(pre).max() <= bound

    def test_determinism_and_substreams(self):
        cfg = ArConfig(N=5)
        a = gen_autoregressive(cfg, 3).panel.outcomes
        gen_autoregressive(cfg, 0)
        b = gen_autoregressive(cfg, 3).panel.outcomes
        np.testing.assert_array_equal(a, b)
        c = gen_autoregressive(cfg, 4).panel.outcomes
        np.testing.assert_array_equal(a[:, :9], c[:, :9])
        assert not np.array_equal(a[:, 9], c[:, 9])
        d = gen_autoregressive(replace(cfg, seed=1), 3).panel.outcomes
        assert not np.array_equal(a, d)

    def test_noise_bound(self):
        g = Grid.uniform(100)
        rng = np.random.default_rng(0)
        C = 0.05
        eps = draw_noise(rng, g, C, 100_000)
        assert np.abs(eps).max() <= 4 * C
        assert np.max(g.norm(eps)) <= noise_bound(g, C)

    def test_covariates(self):
        inst = gen_autoregressive(ArConfig(N=8, n_covariates=2), 0)
        assert inst.panel.covariates.shape == (8, 2)


class TestLatentFactor:
    def test_equal_loadings_equal_units(self):
        cfg = FactorConfig(N=4, C=0.0)
        phi = np.random.default_rng(0).normal(size=(4, 5))
        phi[1] = phi[0]
        y = gen_latent_factor(cfg, 0, loadings=phi).panel.outcomes
        np.testing.assert_array_equal(y[0], y[1])

    def test_factor_span(self):
        cfg = FactorConfig(N=20, C=0.0)
        inst = gen_latent_factor(cfg, 0)
        data = inst.panel.outcomes.reshape(20, -1)
        s = np.linalg.svd(data, compute_uv=False)
        assert np.sqrt(np.sum(s[5:] ** 2)) <= 1e-8

    def test_factor_curves(self):
        cfg = FactorConfig()
        g = Grid.uniform(100)
        mu = sim.factor_curves(cfg, g)
        np.testing.assert_array_equal(mu[0, 0], 1.0)
        np.testing.assert_allclose(mu[2, 4], np.sqrt(2) * np.cos(8 * np.pi * g.points))

    def test_determinism(self):
        cfg = FactorConfig(N=6)
        np.testing.assert_array_equal(gen_latent_factor(cfg, 2).panel.outcomes,
                                      gen_latent_factor(cfg, 2).panel.outcomes)
        assert not np.array_equal(gen_latent_factor(cfg, 2).internals["loadings"],
                                  gen_latent_factor(cfg, 3).internals["loadings"])

    def test_cosine_design_is_rank_deficient(self):
        mu = sim.factor_curves(FactorConfig(), Grid.uniform(100))
        for xi in (3, 40, 77):
            assert np.linalg.matrix_rank(mu[:, :9, xi], tol=1e-10) <= 3
        M1, M2, coef = factor_constants(mu, 9)
        assert M2 <= 1e-12

    def test_separable_constants_closed_form(self):
        cfg = FactorConfig(factors="separable")
        g = Grid.uniform(100)
        mu = sim.factor_curves(cfg, g)
        j = np.arange(1, 6)[:, None]
        t = np.arange(1, 11)[None, :]
        temporal = np.sqrt(2) * np.cos(j * np.pi * (t - 0.5) / 10)
        M1_ref = np.abs(temporal).max() * (1 + g.points.max() / 2)
        pre = temporal[:, :9]
        M2_ref = np.linalg.eigvalsh(pre @ pre.T)[0] * (1 + g.points.min() / 2) ** 2
        M1, M2, coef = factor_constants(mu, 9)
        assert M1 == pytest.approx(M1_ref, rel=1e-12)
        assert M2 == pytest.approx(M2_ref, rel=1e-10)
        assert coef == pytest.approx(M1_ref ** 2 * 5 ** 1.5 / (M2_ref * 3), rel=1e-10)

    def test_unit_factor_constants(self):
        assert factor_constants(np.ones((1, 2, 7)), 1) == (1.0, 1.0, 1.0)


class TestEstimators:
    def test_fittable_noiseless_treated_unit(self):
        inst = gen_autoregressive(ArConfig(N=12, C=0.0), 0)
        p = inst.panel
        g = p.grid
        pre = p.outcomes[:, :9].copy()
        pre[0] = 0.3 * pre[2] + 0.7 * pre[5]
        post = apply_kernels(inst.internals["beta"], pre, g)
        panel = Panel(np.concatenate([pre, post[:, None]], axis=1), g, 9)
        basis = build_basis("bspline_cubic", 50, g)
        fitted = fit_pre_period(panel, basis, ["fsc", "afsc_cv", "afsc_0.01cv"])
        errs = {n: g.norm(post[0] - estimate(panel, fitted, n)) for n in fitted.weights}
        assert errs["afsc_cv"] <= errs["fsc"] + 1e-8
        assert errs["afsc_0.01cv"] <= errs["fsc"] + 1e-8

    def test_agsc_exact_under_linear_dynamics(self):
        rng = np.random.default_rng(1)
        g = Grid.uniform(20)
        pre = rng.normal(size=(15, 5, 20))
        alpha = np.array([0.1, -0.2, 0.0, 0.5, 0.3])
        post = np.einsum("t,ntx->nx", alpha, pre)
        p = Panel(np.concatenate([pre, post[:, None]], axis=1), g, 5)
        np.testing.assert_allclose(sim.agsc_coefficients(p), alpha, atol=1e-12)
        est = agsc_estimate(p, fit_scm(p))
        np.testing.assert_allclose(est, post[0], atol=1e-12)

    def test_fixed_lambda_name(self):
        inst = gen_autoregressive(ArConfig(N=8), 0)
        basis = build_basis("bspline_cubic", 20, inst.panel.grid)
        fitted = fit_pre_period(inst.panel, basis, ["afsc:0.5"])
        assert fitted.lam_cv is None
        assert fitted.weights["afsc:0.5"].sum() == pytest.approx(1.0)
        with pytest.raises(ValidationError):
            fit_pre_period(inst.panel, basis, ["sdid"])


class TestBounds:
    def test_auto_perfect_fit_zero_noise(self):
        inst = gen_autoregressive(ArConfig(N=6, C=0.0), 0)
        p = inst.panel
        y = p.outcomes.copy()
        y[0] = y[3]
        panel = Panel(y, p.grid, 9)
        inst2 = SimInstance(panel, HilbertElement(y[0, 9], p.grid), inst.internals)
        rep = evaluate_bound_auto(inst2, np.eye(5)[2], 0.0)
        assert rep.realized == 0.0
        assert rep.rhs == 0.0
        assert not rep.violated

    def test_auto_linearity_in_kernels(self):
        inst = gen_autoregressive(ArConfig(N=10), 0)
        w = fit_scm(inst.panel)
        base = evaluate_bound_auto(inst, w, 1.0)
        doubled = dict(inst.internals, beta=2 * inst.internals["beta"])
        rep = evaluate_bound_auto(SimInstance(inst.panel, inst.truth, doubled), w, 1.0)
        assert rep.terms["fit"] == pytest.approx(2 * base.terms["fit"], rel=1e-14)
        assert rep.terms["noise"] == base.terms["noise"]

    def test_auto_terms(self):
        inst = gen_autoregressive(ArConfig(N=10), 0)
        g = inst.panel.grid
        w = fit_scm(inst.panel).weights
        rep = evaluate_bound_auto(inst, w, 2.0)
        bn = np.sqrt(np.sum(kernel_norm(inst.internals["beta"], g) ** 2))
        resid = inst.panel.outcomes[0, :9] - np.tensordot(w, inst.panel.outcomes[1:, :9], 1)
        fit = np.sqrt(np.sum(g.sqnorm(resid)))
        assert rep.terms["fit"] == pytest.approx(bn * fit, rel=1e-12)
        sigma = noise_bound(g, 0.05)
        assert rep.terms["noise"] == pytest.approx(2 * sigma * (1 + np.linalg.norm(w)), rel=1e-12)

    def test_factor_linearity_in_sigma(self):
        cfg = FactorConfig(N=10, factors="separable")
        inst = gen_latent_factor(cfg, 0)
        w = fit_scm(inst.panel)
        base = evaluate_bound_factor(inst, w, 2.0)
        it = dict(inst.internals, sigma=2 * inst.internals["sigma"])
        rep = evaluate_bound_factor(SimInstance(inst.panel, inst.truth, it), w, 2.0)
        assert rep.terms["weights"] == pytest.approx(2 * base.terms["weights"], rel=1e-14)
        assert rep.terms["noise"] == pytest.approx(2 * base.terms["noise"], rel=1e-14)
        assert rep.terms["fit"] == base.terms["fit"]

    def test_factor_rank_deficiency_is_reported(self):
        inst = gen_latent_factor(FactorConfig(N=10), 0)
        rep = evaluate_bound_factor(inst, fit_scm(inst.panel), 1.0)
        assert rep.skipped and "rank" in rep.reason
        assert not rep.violated


class TestMonteCarlo:
    def test_reproducible_and_thread_independent(self):
        cfg = ArConfig(N=10)
        a = run_monte_carlo(cfg, reps=3, K=20)
        b = run_monte_carlo(cfg, reps=3, K=20, threads=3)
        for name in a.names:
            np.testing.assert_array_equal(a.errors[name], b.errors[name])
        one = run_monte_carlo(cfg, reps=1, K=20)
        again = run_monte_carlo(cfg, reps=1, K=20)
        assert one.summary() == again.summary()

    def test_factor_run_and_bounds(self):
        cfg = FactorConfig(N=10, factors="separable")
        res = run_monte_carlo(cfg, ["fsc", "afsc_cv"], reps=4, K=20,
                              bound_estimators=["fsc"], deltas=(1.0, 3.0))
        assert set(res.bounds["fsc"]) == {1.0, 3.0}
        assert 0.0 <= res.violation_rate("fsc", 1.0) <= 1.0
        rows = res.summary()
        assert [r["estimator"] for r in rows] == ["fsc", "afsc_cv"]
        assert rows[0]["q25"] <= rows[0]["median"] <= rows[0]["q75"]

    def test_failures_are_recorded(self, monkeypatch):
        real = sim.estimate
        calls = {"n": 0}

        def flaky(panel, fitted, name):
            calls["n"] += 1
            if calls["n"] == 1:
                raise SolverError("forced failure", gap=1.0, iterations=0)
            return real(panel, fitted, name)

        monkeypatch.setattr(sim, "estimate", flaky)
        res = run_monte_carlo(ArConfig(N=8), ["fsc"], reps=3, K=20)
        assert list(res.failures) == [0]
        assert np.isnan(res.errors["fsc"][0]) and np.all(np.isfinite(res.errors["fsc"][1:]))
        assert res.summary()[0]["failures"] == 1

    def test_reps_validation(self):
        with pytest.raises(ValidationError):
            run_monte_carlo(ArConfig(N=8), reps=0)
