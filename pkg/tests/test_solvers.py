import json
import math

import numpy as np
import pytest

from specmatch.criterion import default_weights, uniform_weights
from specmatch.experiments import SimulationSpec, simulate
from specmatch.linalg import ObservationMask, error_norms, incoherence, project_mask, svd
from specmatch.reference import estimate_reference
from specmatch.solvers import (
    DIVERGENCE_FACTOR,
    SolverConfig,
    SolverReport,
    init_factors,
    init_spectral,
    pseudo_gradient,
    residual_state,
    solve_factorized,
    solve_nuclear,
)


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("refs"))


def small_problem(seed=0, m=60, n=30, r=3, p=0.6, sigma=0.1):
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
    mask = ObservationMask.from_array(rng.random((m, n)) < p)
    y = project_mask(truth + sigma * rng.standard_normal((m, n)), mask)
    return y, mask, truth


class TestInit:
    def test_full_mask_rank_r_is_identity(self):
        y = small_problem(sigma=0.0)[2]
        np.testing.assert_allclose(init_spectral(y, ObservationMask.full(*y.shape), 3), y, atol=1e-9)

    def test_zero(self):
        mask = ObservationMask.full(8, 5)
        np.testing.assert_array_equal(init_spectral(np.zeros((8, 5)), mask, 2), 0)

    def test_factors_split_singular_values(self):
        y, mask, _ = small_problem()
        r_fac, l_fac, s1 = init_factors(y, mask, 3)
        np.testing.assert_allclose(r_fac @ l_fac.T, init_spectral(y, mask, 3), atol=1e-10)
        np.testing.assert_allclose(np.linalg.norm(r_fac, axis=0), np.linalg.norm(l_fac, axis=0), rtol=1e-10)
        assert s1 == pytest.approx(svd(y / mask.p_hat, compute_uv=False)[0])

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError):
            init_spectral(np.ones((5, 4)), ObservationMask.full(5, 4), 5)

    def test_case1_init_error(self):
        for seed in range(20):
            sim = simulate(SimulationSpec(1, 500, 250, 0.2, 0.0, seed))
            m0 = init_spectral(sim.y, sim.mask, 5)
            assert np.linalg.norm(m0 - sim.truth) <= 0.5 * np.linalg.norm(sim.truth)


class TestPseudoGradient:
    def test_zero_at_exact_match(self):
        ref = estimate_reference(30, 12, 1.0, 4, 0)
        rng = np.random.default_rng(1)
        u = np.linalg.qr(rng.standard_normal((30, 12)))[0]
        v = np.linalg.qr(rng.standard_normal((12, 12)))[0]
        f = svd(math.sqrt(30) * 0.8 * (u * ref.lambda_hat) @ v.T)
        g = pseudo_gradient(f, 0.8, ref, default_weights(12, 1), ObservationMask.full(30, 12))
        assert np.abs(g).max() <= 1e-12

    def test_zero_off_mask(self):
        y, mask, _ = small_problem()
        ref = estimate_reference(60, 30, mask.p_hat, 4, 0)
        f, lb = residual_state(y, mask, np.zeros_like(y), ref, default_weights(30, 3))
        g = pseudo_gradient(f, lb.sigma_hat, ref, default_weights(30, 3), mask)
        assert np.all(g[~mask.observed] == 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        m, n = 40, 20
        rng = np.random.default_rng(seed)
        ref = estimate_reference(m, n, 1.0, 8, seed)
        w = default_weights(n, 2)
        mask = ObservationMask.full(m, n)
        y = rng.standard_normal((m, n)) + 3 * np.outer(rng.standard_normal(m), rng.standard_normal(n))
        est = 0.5 * np.outer(rng.standard_normal(m), rng.standard_normal(n))
        f, lb = residual_state(y, mask, est, ref, w)
        sh = lb.sigma_hat
        g = pseudo_gradient(f, sh, ref, w, mask)

        def frozen(mat):
            s = svd(y - mat, compute_uv=False)
            return float((w.w * (s / (math.sqrt(m) * sh) - ref.lambda_hat) ** 2).sum())

        h = 1e-6
        for _ in range(10):
            d = rng.standard_normal((m, n))
            d /= np.linalg.norm(d)
            fd = (frozen(est + h * d) - frozen(est - h * d)) / (2 * h)
            analytic = -2 / (math.sqrt(m) * sh) * float((g * d).sum())
            assert abs(fd - analytic) <= 1e-5 * abs(analytic)


class TestFactorized:
    def test_noiseless_recovery(self, cache):
        sim = simulate(SimulationSpec(1, 200, 100, 0.5, 0.0, 3))
        e0 = np.linalg.norm(init_spectral(sim.y, sim.mask, 5) - sim.truth)
        rep = solve_factorized(sim.y, sim.mask, SolverConfig(rank_s=5, cache_dir=cache), sim.truth)
        assert np.linalg.norm(rep.estimate - sim.truth) <= 0.02 * e0

    def test_rank_invariant(self, cache):
        y, mask, _ = small_problem()
        ranks = []
        solve_factorized(y, mask, SolverConfig(rank_s=3, max_iters=15, cache_dir=cache),
                         callback=lambda k, est: ranks.append(np.linalg.matrix_rank(est)))
        assert ranks and max(ranks) <= 3

    def test_line_search_monotone(self, cache):
        y, mask, truth = small_problem(sigma=0.5)
        rep = solve_factorized(y, mask, SolverConfig(rank_s=3, max_iters=40, eta0=2.0, line_search=True,
                                                     cache_dir=cache), truth)
        losses = [r["loss"] for r in rep.trace]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    @pytest.mark.parametrize("eta0", [2.0, 8.0])
    def test_fixed_step_never_runs_away(self, cache, eta0):
        y, mask, truth = small_problem(sigma=0.5)
        rep = solve_factorized(y, mask, SolverConfig(rank_s=3, max_iters=40, eta0=eta0, cache_dir=cache), truth)
        losses = [r["loss"] for r in rep.trace]
        assert np.all(np.isfinite(rep.estimate))
        assert all(b <= DIVERGENCE_FACTOR * a for a, b in zip(losses, losses[1:]))

    def test_overparametrized_case1_stays_bounded(self, cache):
        # s = 6 > r = 5 on this seed overflowed within 8 fixed steps before the guard
        sim = simulate(SimulationSpec(1, 500, 250, 0.2, 1.0, 3))
        rep = solve_factorized(sim.y, sim.mask, SolverConfig(rank_s=6, cache_dir=cache), sim.truth)
        assert rep.trace[-1]["e_f"] < 1.0

    def test_trace_invariants(self, cache):
        y, mask, truth = small_problem()
        rep = solve_factorized(y, mask, SolverConfig(rank_s=3, max_iters=25, cache_dir=cache), truth)
        assert len(rep.trace) == rep.iters_run
        assert all(math.isfinite(r["loss"]) for r in rep.trace)
        assert set(rep.trace[0]) >= {"iter", "loss", "sigma_hat", "step", "rel_change", "e_f", "e_sp", "e_inf"}
        assert rep.trace[-1]["e_f"] == pytest.approx(error_norms(rep.estimate, truth)[0])

    def test_nan_poisoning(self, cache):
        y, mask, _ = small_problem()
        poisoned = y.copy()
        poisoned[~mask.observed] = np.nan
        cfg = SolverConfig(rank_s=3, max_iters=20, cache_dir=cache)
        a = solve_factorized(y, mask, cfg)
        b = solve_factorized(poisoned, mask, cfg)
        assert np.all(np.isfinite(b.estimate))
        np.testing.assert_array_equal(a.estimate, b.estimate)

    def test_deterministic(self, cache):
        y, mask, _ = small_problem()
        cfg = SolverConfig(rank_s=3, max_iters=20, cache_dir=cache)
        a, b = solve_factorized(y, mask, cfg), solve_factorized(y, mask, cfg)
        np.testing.assert_array_equal(a.estimate, b.estimate)
        assert a.to_json() == b.to_json()

    def test_transpose_equivalence(self, cache):
        y, mask, _ = small_problem()
        cfg = SolverConfig(rank_s=3, max_iters=20, cache_dir=cache)
        a = solve_factorized(y, mask, cfg)
        b = solve_factorized(y.T, mask.T, cfg)
        assert b.transposed and not a.transposed
        np.testing.assert_allclose(b.estimate, a.estimate.T, atol=1e-8)

    def test_incoherence_tracking(self, cache):
        sim = simulate(SimulationSpec(1, 500, 250, 0.2, 1.0, 7))
        mu0 = incoherence(init_spectral(sim.y, sim.mask, 5), 5).mu
        mus = []
        solve_factorized(sim.y, sim.mask, SolverConfig(rank_s=5, cache_dir=cache),
                         callback=lambda k, est: mus.append(incoherence(est, 5).mu))
        assert mus and max(mus) <= 3 * mu0

    def test_rank_too_large(self, cache):
        y, mask, _ = small_problem()
        with pytest.raises(ValueError):
            solve_factorized(y, mask, SolverConfig(rank_s=31, cache_dir=cache))

    def test_needs_rank(self, cache):
        y, mask, _ = small_problem()
        with pytest.raises(ValueError):
            solve_factorized(y, mask, SolverConfig(lambda_nuc=1.0, cache_dir=cache))


class TestNuclear:
    def test_huge_lambda_gives_zero(self, cache):
        y, mask, _ = small_problem()
        rep = solve_nuclear(y, mask, SolverConfig(lambda_nuc=1e6, max_iters=5, cache_dir=cache))
        np.testing.assert_array_equal(rep.estimate, 0)

    def test_zero_lambda_full_mask(self, cache):
        y, _, _ = small_problem()
        mask = ObservationMask.full(*y.shape)
        rep = solve_nuclear(y, mask, SolverConfig(lambda_nuc=0.0, cache_dir=cache))
        assert rep.degenerate and rep.converged and rep.iters_run == 0
        np.testing.assert_allclose(rep.estimate, y, atol=1e-10)

    def test_first_threshold_rank(self, cache):
        y, mask, _ = small_problem(sigma=0.5)
        lam = 8.0
        rep = solve_nuclear(y, mask, SolverConfig(lambda_nuc=lam, max_iters=1, cache_dir=cache))
        assert rep.iters_run == 1
        assert np.linalg.matrix_rank(rep.estimate) <= np.sum(svd(y / mask.p_hat, compute_uv=False) > lam / 2) + 3

    def test_line_search_monotone(self, cache):
        y, mask, truth = small_problem(sigma=0.5)
        rep = solve_nuclear(y, mask, SolverConfig(lambda_nuc=5.0, max_iters=40, eta0=2.0, line_search=True,
                                                  weight_rank=3, cache_dir=cache), truth)
        losses = [r["loss"] for r in rep.trace]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_nan_poisoning(self, cache):
        y, mask, _ = small_problem()
        poisoned = y.copy()
        poisoned[~mask.observed] = np.nan
        cfg = SolverConfig(lambda_nuc=3.0, max_iters=20, weight_rank=3, cache_dir=cache)
        np.testing.assert_array_equal(solve_nuclear(y, mask, cfg).estimate,
                                      solve_nuclear(poisoned, mask, cfg).estimate)

    def test_warm_start(self, cache):
        y, mask, truth = small_problem()
        cfg = SolverConfig(lambda_nuc=3.0, max_iters=1, weight_rank=3, cache_dir=cache)
        rep = solve_nuclear(y, mask, cfg, init=truth)
        assert np.linalg.norm(rep.estimate - truth) < np.linalg.norm(truth)


class TestConfigAndReport:
    @pytest.mark.parametrize("kw", [
        {}, {"rank_s": 2, "lambda_nuc": 1.0}, {"rank_s": 0}, {"lambda_nuc": -1.0},
        {"rank_s": 2, "max_iters": 0}, {"rank_s": 2, "eta0": 0.0}, {"rank_s": 2, "tol": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_default_steps(self):
        assert SolverConfig(rank_s=2).eta0 == 0.25
        assert SolverConfig(lambda_nuc=1.0).eta0 == 0.5

    def test_weight_and_reference_mismatch(self, cache):
        y, mask, _ = small_problem()
        with pytest.raises(ValueError):
            solve_factorized(y, mask, SolverConfig(rank_s=2, weights=uniform_weights(29)))
        with pytest.raises(ValueError):
            solve_factorized(y, mask, SolverConfig(rank_s=2, reference=estimate_reference(30, 30, 0.5, 1, 0)))

    def test_serialization(self, cache):
        y, mask, truth = small_problem()
        rep = solve_factorized(y, mask, SolverConfig(rank_s=3, max_iters=5, cache_dir=cache), truth)
        lines = rep.trace_csv().splitlines()
        assert lines[0] == "iter,loss,sigma_hat,step,rel_change,e_f,e_sp,e_inf"
        assert len(lines) == rep.iters_run + 1
        assert float(lines[1].split(",")[1]) == rep.trace[0]["loss"]
        doc = json.loads(rep.to_json(include_estimate=True))
        assert doc["iters_run"] == rep.iters_run
        np.testing.assert_array_equal(np.array(doc["estimate"]), rep.estimate)

    def test_plain_trace_columns(self):
        rep = SolverReport(np.zeros((2, 2)), 1, [{"iter": 0, "loss": 1.0, "sigma_hat": 1.0, "step": 0.1,
                                                  "rel_change": 0.5}])
        assert rep.trace_csv().splitlines()[0] == "iter,loss,sigma_hat,step,rel_change"
