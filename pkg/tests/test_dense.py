import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csbm import InvalidParameterError, ModelParams, ResourceBudgetError, make_supervision, sample_instance
from csbm.amp_bp import RunOptions, overlap
from csbm.dense import (
    DenseParams,
    GraphOperator,
    SeOptions,
    delta_inverse,
    run_amp_amp,
    se_predicted_overlap,
    se_step,
    spiked_surrogate,
    state_evolution,
    tanh_expectation,
    transform_adjacency,
)


class TestTransform:
    def test_half_density(self):
        s, di = transform_adjacency(np.array([[0, 1], [1, 0]]), 0.5)
        assert s[0, 1] == 1.0
        s, _ = transform_adjacency(np.array([[0, 0], [0, 0]]), 0.5)
        assert s[0, 1] == -1.0
        assert di == 1.0

    def test_sparse_density(self):
        s, _ = transform_adjacency(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]), 0.1)
        assert s[0, 1] == pytest.approx(5.0)
        assert s[0, 2] == pytest.approx(-0.5556, abs=1e-4)
        assert np.all(np.diag(s) == 0)

    def test_bounds(self):
        for dt in (0.0, 1.0):
            with pytest.raises(InvalidParameterError):
                transform_adjacency(np.zeros((2, 2)), dt)

    def test_cap(self):
        with pytest.raises(ResourceBudgetError):
            transform_adjacency(np.zeros((5, 5)), 0.5, cap=4)

    def test_operator_matches_dense_matrix(self, rng):
        inst = sample_instance(ModelParams(300, 10, 40.0, 1.0, 0.0), 0)
        dt, nu = 40.0 / 300, 0.7
        s, di = transform_adjacency(inst.graph.to_dense(), dt, nu)
        op = GraphOperator(inst, dt, nu)
        x = rng.normal(size=300)
        np.testing.assert_allclose(op(x), nu / math.sqrt(300) * s @ x, atol=1e-12)
        assert op.delta_i == pytest.approx(di)

    def test_matched_parameters(self):
        p = ModelParams(10_000, 1000, 25.0, 0.9, 2.0)
        dp = DenseParams.from_sparse(p)
        assert dp.delta_i == pytest.approx(0.81 / (1 - 25 / 10_000))
        assert delta_inverse(1.0, 0.5) == 1.0

    def test_transformed_matrix_moments(self):
        # mean (Delta_I / N) u u^T and variance Delta_I / N at leading order
        n, dt, nu = 2000, 0.2, 0.4
        gen = np.random.default_rng(0)
        u = gen.choice([-1.0, 1.0], n)
        p = dt + 0.5 * nu / math.sqrt(n) * np.outer(u, u)
        a = (gen.random((n, n)) < p).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        s, di = transform_adjacency(a, dt, nu)
        y = nu / math.sqrt(n) * s
        iu = np.triu_indices(n, 1)
        same = (np.outer(u, u) > 0)[iu]
        assert y[iu][same].mean() == pytest.approx(di / n, rel=0.05)
        assert y[iu].var() == pytest.approx(di / n, rel=0.05)


class TestAmpAmp:
    def test_null_state_stationary(self):
        inst = sample_instance(ModelParams(500, 50, 5.0, 0.0, 0.0), 0)
        sup = make_supervision(inst, 0.0)
        res = run_amp_amp(inst, sup, RunOptions(init_noise=0.0, max_iters=3),
                          dense_params=DenseParams(500, 50, 0.1, 0.0, 0.0))
        assert np.all(res.u_hat == 0.0)
        assert res.converged

    def test_fully_revealed(self):
        inst = sample_instance(ModelParams(500, 50, 20.0, 1.0, 2.0), 0)
        sup = make_supervision(inst, 1.0, 1.0, 0)
        res = run_amp_amp(inst, sup)
        assert np.array_equal(res.u_hat, inst.labels.astype(float))

    def test_surrogate_matches_state_evolution(self):
        n, lam, mu, alpha, rho = 3000, 0.9, 2.0, 10.0, 0.1
        inst = sample_instance(ModelParams(n, int(n / alpha), 5.0, lam, mu), 1)
        sup = make_supervision(inst, rho, 1.0, 1)
        op = spiked_surrogate(inst.labels, lam**2, 1)
        res = run_amp_amp(inst, sup, RunOptions(max_iters=300), operator=op)
        se = state_evolution(mu, alpha, lam**2, rho)
        assert res.magnetization(inst.labels) == pytest.approx(se.m_u, abs=0.03)

    def test_multi_instance_rejected(self):
        from csbm import MultiParams, affinity_from_snr
        from csbm.model import unsupervised

        inst = sample_instance(MultiParams(100, 10, affinity_from_snr(5.0, 1.0, 3), (1 / 3,) * 3, 1.0), 0)
        with pytest.raises(InvalidParameterError):
            run_amp_amp(inst, unsupervised(100, (1 / 3,) * 3))

    @pytest.mark.slow
    def test_predicted_overlap_matches_simulation(self):
        lam, mu, alpha, rho, n = 0.9, 2.0, 10.0, 0.1, 30_000
        qs, preds = [], []
        for seed in range(10):
            inst = sample_instance(ModelParams(n, int(n / alpha), 50.0, lam, mu), seed)
            sup = make_supervision(inst, rho, 1.0, seed)
            res = run_amp_amp(inst, sup, RunOptions(seed=seed, max_iters=300))
            qs.append(overlap(res.hard_labels, inst.labels, test_mask=sup.test_mask))
            se = state_evolution(mu, alpha, DenseParams.from_sparse(inst.params).delta_i, rho)
            preds.append(se_predicted_overlap(se.m_u, rho, se.m))
        assert abs(np.mean(qs) - np.mean(preds)) < 0.02


class TestStateEvolution:
    def test_zero_is_fixed_point(self):
        res = state_evolution(2.0, 10.0, 0.5, 0.0)
        assert res.m_u == 0.0 and res.fixed_point.m_v == 0.0 and res.m == 0.0

    def test_fully_revealed(self):
        res = state_evolution(2.0, 10.0, 0.5, 1.0)
        for st_ in res.trajectory:
            assert st_.m_u == 1.0
        assert res.fixed_point.m_v == pytest.approx(2.0 / 3.0)

    def test_reference_point_against_monte_carlo(self):
        rho = 0.1
        res = state_evolution(2.0, 10.0, 0.81, rho)
        assert res.converged
        gen = np.random.default_rng(0)
        m = res.m
        acc = 0.0
        for _ in range(10):
            w = gen.standard_normal(1_000_000)
            acc += np.tanh(m + math.sqrt(m) * w).sum()
        mc = acc / 1e7
        assert tanh_expectation(m) == pytest.approx(mc, abs=1e-3)
        assert res.m_u == pytest.approx(rho + (1 - rho) * mc, abs=1e-3)

    @pytest.mark.parametrize("m", [0.01, 0.5, 3.0, 10.0, 50.0])
    def test_quadrature_against_adaptive_integration(self, m):
        from scipy.integrate import quad
        from scipy.stats import norm

        ref, _ = quad(lambda w: math.tanh(m + math.sqrt(m) * w) * norm.pdf(w), -40, 40,
                      epsabs=1e-14, epsrel=1e-13, limit=500)
        assert tanh_expectation(m) == pytest.approx(ref, rel=1e-8, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(mu=st.floats(0.0, 4.0), alpha=st.floats(0.5, 20.0), di=st.floats(0.0, 3.0), rho=st.floats(0.0, 0.5))
    def test_trajectories_monotone(self, mu, alpha, di, rho):
        up = state_evolution(mu, alpha, di, rho, SeOptions(max_iters=300))
        down = state_evolution(mu, alpha, di, rho, SeOptions(max_iters=300, informative=True))
        mu_up = [s.m_u for s in up.trajectory]
        mu_down = [s.m_u for s in down.trajectory]
        assert all(b >= a - 1e-12 for a, b in zip(mu_up, mu_up[1:]))
        assert all(b <= a + 1e-12 for a, b in zip(mu_down, mu_down[1:]))
        assert down.m_u >= up.m_u - 1e-9

    def test_step_formula(self):
        st_ = se_step(0.3, 2.0, 10.0, 0.5, 0.1)
        m_v = 2.0 * 0.3 / (1 + 2.0 * 0.3)
        assert st_.m == pytest.approx(0.2 * m_v + 0.5 * 0.3)

    def test_invalid(self):
        with pytest.raises(InvalidParameterError):
            state_evolution(2.0, 0.0, 1.0, 0.1)


class TestPredictedOverlap:
    def test_zero(self):
        assert se_predicted_overlap(0.0, 0.0, 0.0) == 0.0

    def test_large(self):
        assert se_predicted_overlap(1.0, 0.0, 400.0) == pytest.approx(1.0)

    def test_monotone(self):
        vals = [se_predicted_overlap(0, 0, m) for m in np.linspace(0, 5, 20)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
