import math
from dataclasses import replace

import numpy as np
import pytest

from csbm import ModelParams, Supervision, make_supervision, sample_instance
from csbm.amp_bp import RunOptions, init_state, run
from csbm.free_energy import (
    EmOptions,
    NotConvergedWarning,
    bethe_free_entropy,
    em_fit,
    em_step,
    finite_difference_gradient,
    free_entropy_gradient,
)
from csbm.graph import random_tree
from csbm.model import Affinity, Instance
from csbm.oracles import exact_posterior

TIGHT = RunOptions(max_iters=1000, msg_tol=1e-10)


def _informed_state(inst, sup, opts):
    s = init_state(inst, sup, opts)
    u = inst.labels.astype(float)
    g = inst.graph
    return replace(s, chi_plus_dir=(1 + u[g.src]) / 2, chi_plus_node=(1 + u) / 2, u_hat=u,
                   v_hat=inst.centroids.astype(float))


class TestBethe:
    def test_null_value(self):
        inst = sample_instance(ModelParams(2000, 200, 5.0, 0.0, 0.0), 0)
        sup = make_supervision(inst, 0.0)
        fp = run(inst, sup, RunOptions(init_noise=0.0, max_iters=3))
        assert fp.converged
        d = 5.0
        expected = -d / 2 + inst.graph.n_edges / inst.n_nodes * math.log(d)
        assert bethe_free_entropy(fp, inst, sup).phi == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_exact_on_trees(self, seed):
        # on a tree without the non-edge field, N (phi - d/2) is the log evidence
        gen = np.random.default_rng(seed)
        n = 10
        params = ModelParams(n, 1, 2.0, 0.7, 0.0)
        inst = Instance(random_tree(n, gen), np.zeros((n, 1)), gen.integers(0, 2, n), np.zeros(1), params, 0)
        prior = gen.uniform(0.1, 0.9, n)
        sup = Supervision(np.zeros(0, dtype=np.int64), np.stack([prior, 1 - prior], 1), np.full(n, -1))
        fp = run(inst, sup, RunOptions(msg_tol=1e-14, init_noise=0.0, non_edge_field=False))
        phi = bethe_free_entropy(fp, inst, sup).phi
        post = exact_posterior(inst, sup, graph_model="edges_only")
        log_z = post.log_evidence + 0.5 * n * math.log(2 * math.pi)  # zero features contribute N(0, 1) densities
        assert n * (phi - params.avg_degree / 2) == pytest.approx(log_z, abs=1e-10)

    def test_naive_equals_factorized(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup, TIGHT)
        a = bethe_free_entropy(fp, inst, sup).phi
        b = bethe_free_entropy(fp, inst, sup, naive=True).phi
        assert a == pytest.approx(b, abs=1e-10)

    def test_warns_when_not_converged(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup, RunOptions(max_iters=1))
        with pytest.warns(NotConvergedWarning):
            val = bethe_free_entropy(fp, inst, sup)
        assert not val.converged

    def test_random_and_informed_starts_agree(self):
        inst = sample_instance(ModelParams(10_000, 1000, 5.0, 1.0, 2.0), 3)
        sup = make_supervision(inst, 0.1, 1.0, 3)
        a = run(inst, sup, TIGHT)
        b = run(inst, sup, TIGHT, init=_informed_state(inst, sup, TIGHT))
        assert a.converged and b.converged
        assert bethe_free_entropy(a, inst, sup).phi == pytest.approx(bethe_free_entropy(b, inst, sup).phi, abs=1e-3)

    @pytest.mark.slow
    def test_truth_maximizes_phi(self):
        for seed in range(5):
            inst = sample_instance(ModelParams(30_000, 3000, 5.0, 1.0, 2.0), seed)
            sup = make_supervision(inst, 0.1, 1.0, seed)
            aff = inst.affinity
            fp = run(inst, sup, TIGHT)
            phi0 = bethe_free_entropy(fp, inst, sup).phi
            for f in (0.9, 1.1):
                pert = Affinity.binary(aff.c_in * f, aff.c_out)
                fq = run(inst, sup, TIGHT, affinity=pert, init=fp.state)
                assert phi0 >= bethe_free_entropy(fq, inst, sup, pert).phi


class TestGradient:
    def test_symmetric_point(self):
        inst = sample_instance(ModelParams(2000, 200, 5.0, 0.0, 0.0), 0)
        sup = make_supervision(inst, 0.0)
        fp = run(inst, sup, RunOptions(init_noise=0.0, max_iters=3))
        g = free_entropy_gradient(fp, inst)
        assert g.d_c_in == pytest.approx(g.d_c_out, abs=1e-6)
        assert g.d_mu is None

    def test_balanced_constant(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup, TIGHT)
        exact = free_entropy_gradient(fp, inst)
        bal = free_entropy_gradient(fp, inst, balanced=True)
        f = float(np.mean(fp.state.chi_plus_node))
        assert exact.d_c_in - bal.d_c_in == pytest.approx(0.5 - f * f - (1 - f) ** 2, abs=1e-12)
        assert exact.d_mu == bal.d_mu

    def test_matches_finite_differences(self):
        inst = sample_instance(ModelParams(3000, 300, 5.0, 1.2, 2.0), 1)
        sup = make_supervision(inst, 0.1, 1.0, 1)
        fp = run(inst, sup, TIGHT)
        g = free_entropy_gradient(fp, inst).as_array()
        fd = finite_difference_gradient(inst, sup, inst.affinity, inst.mu, TIGHT, init=fp.state)
        np.testing.assert_allclose(g, fd, atol=5e-3)

    @pytest.mark.slow
    def test_stationary_at_truth(self):
        for seed in range(5):
            inst = sample_instance(ModelParams(30_000, 3000, 5.0, 1.0, 2.0), seed)
            sup = make_supervision(inst, 0.1, 1.0, seed)
            g = free_entropy_gradient(run(inst, sup, TIGHT), inst)
            assert np.all(np.abs(g.as_array()) < 0.02)


class TestEm:
    def test_symmetric_point_equal_affinities(self):
        inst = sample_instance(ModelParams(2000, 200, 5.0, 0.0, 0.0), 0)
        sup = make_supervision(inst, 0.0)
        fp = run(inst, sup, RunOptions(init_noise=0.0, max_iters=3))
        up = em_step(fp, inst)
        assert up.c_in == pytest.approx(up.c_out, rel=1e-12)
        assert up.c_in == pytest.approx(2 * inst.graph.n_edges / inst.n_nodes, rel=1e-12)
        assert not up.mu_informative

    def test_no_feature_signal(self):
        inst = sample_instance(ModelParams(10_000, 1000, 5.0, 1.5, 0.0), 1)
        sup = make_supervision(inst, 0.1, 1.0, 1)
        up = em_step(run(inst, sup, TIGHT), inst)
        assert (not up.mu_informative) or up.mu < 0.05

    def test_mu_update_decreases_without_signal(self):
        inst = sample_instance(ModelParams(10_000, 1000, 5.0, 1.5, 0.0), 1)
        sup = make_supervision(inst, 0.1, 1.0, 1)
        mu, state = 0.5, None
        for _ in range(4):
            fp = run(inst, sup, TIGHT, mu=mu, init=state)
            state = fp.state
            new = em_step(fp, inst, mu=mu).mu
            assert new < mu
            mu = new

    @pytest.mark.slow
    def test_step_at_truth(self):
        for seed in range(5):
            inst = sample_instance(ModelParams(30_000, 3000, 5.0, 1.0, 2.0), seed)
            sup = make_supervision(inst, 0.1, 1.0, seed)
            up = em_step(run(inst, sup, TIGHT), inst)
            truth = (inst.affinity.c_in, inst.affinity.c_out, inst.mu)
            for est, t in zip((up.c_in, up.c_out, up.mu), truth):
                assert abs(est - t) < 0.05 * t

    def test_fit_from_perturbed_start(self):
        # P = 2500 features keep the sampling error of the mu estimate at a few percent
        inst = sample_instance(ModelParams(10_000, 2500, 5.0, 1.0, 2.0), 2)
        sup = make_supervision(inst, 0.1, 1.0, 2)
        truth = np.array([inst.affinity.c_in, inst.affinity.c_out, inst.mu])
        est = em_fit(inst, sup, tuple(truth * [1.3, 0.7, 1.5]))
        assert est.converged
        np.testing.assert_allclose([est.c_in, est.c_out, est.mu], truth, rtol=0.1)
        # stationarity of the returned estimate
        fp = run(inst, sup, TIGHT, affinity=est.affinity, mu=est.mu)
        up = em_step(fp, inst)
        for a, b in zip((up.c_in, up.c_out, up.mu), (est.c_in, est.c_out, est.mu)):
            assert abs(a - b) < 0.005 * b

    @pytest.mark.slow
    def test_start_at_truth_is_stationary(self):
        # the finite-N EM fixed point sits ~1-4% from the truth, so stationarity is
        # judged at a 1% tolerance rather than the default 1e-4
        inst = sample_instance(ModelParams(30_000, 3000, 5.0, 1.0, 2.0), 0)
        sup = make_supervision(inst, 0.1, 1.0, 0)
        truth = (inst.affinity.c_in, inst.affinity.c_out, inst.mu)
        est = em_fit(inst, sup, truth, EmOptions(tol=0.01))
        assert est.converged
        assert len(est.trace) <= 3

    def test_below_threshold_reported(self):
        inst = sample_instance(ModelParams(5000, 500, 5.0, 0.4, 0.5), 2)
        sup = make_supervision(inst, 0.0)
        est = em_fit(inst, sup, (6.0, 4.0, 0.5), EmOptions(max_outer=15))
        # uninformative regime: reported, not failed
        assert np.isfinite([est.c_in, est.c_out, est.mu]).all()
        assert abs(est.c_in - est.c_out) < abs(6.0 - 4.0)

    def test_rejects_negative_start(self, small_supervised):
        from csbm import InvalidParameterError

        inst, sup = small_supervised
        with pytest.raises(InvalidParameterError):
            em_fit(inst, sup, (-1.0, 2.0, 1.0))
