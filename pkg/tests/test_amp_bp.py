import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from csbm import InvalidParameterError, ModelParams, Supervision, make_supervision, sample_instance
from csbm import amp_bp
from csbm.amp_bp import InitNoise, RunOptions, init_state, iterate, overlap, run
from csbm.graph import Graph, random_tree
from csbm.model import Instance, unsupervised
from csbm.oracles import exact_marginals


def _tree_instance(n, seed, c=(3.0, 1.0)):
    gen = np.random.default_rng(seed)
    g = random_tree(n, gen)
    d = 0.5 * (c[0] + c[1])
    lam = (c[0] - c[1]) / (2 * math.sqrt(d))
    params = ModelParams(n, 1, d, lam, 0.0)
    groups = gen.integers(0, 2, n)
    inst = Instance(g, np.zeros((n, 1)), groups, np.zeros(1), params, seed)
    prior = gen.uniform(0.05, 0.95, n)
    sup = Supervision(np.zeros(0, dtype=np.int64), np.stack([prior, 1 - prior], axis=1), np.full(n, -1))
    return inst, sup


def _permuted(inst, perm):
    inv = np.argsort(perm)
    return Instance(inst.graph.permuted(perm), inst.features_nm[inv], inst.groups[inv],
                    inst.centroids, inst.params, inst.seed)


class TestInit:
    def test_uninformative_start(self, small_instance):
        sup = make_supervision(small_instance, 0.0)
        s = init_state(small_instance, sup, RunOptions(init_noise=0.0))
        assert np.all(s.chi_plus_dir == 0.5)
        assert np.all(s.u_hat == 0.0)
        assert np.all(s.v_hat == 0.0)

    def test_fully_revealed_start(self, small_instance):
        sup = make_supervision(small_instance, 1.0, 1.0, 0)
        s = init_state(small_instance, sup, RunOptions(init_noise=0.0))
        assert np.array_equal(s.u_hat, small_instance.labels.astype(float))

    def test_seeded_init_reproducible(self, small_instance):
        sup = make_supervision(small_instance, 0.0)
        a = init_state(small_instance, sup, RunOptions(seed=5))
        b = init_state(small_instance, sup, RunOptions(seed=5))
        c = init_state(small_instance, sup, RunOptions(seed=6))
        assert np.array_equal(a.chi_plus_dir, b.chi_plus_dir)
        assert np.array_equal(a.v_hat, b.v_hat)
        assert not np.array_equal(a.v_hat, c.v_hat)


class TestIterate:
    def test_null_state_is_fixed_point(self):
        inst = sample_instance(ModelParams(500, 50, 5.0, 0.0, 0.0), 1)
        sup = make_supervision(inst, 0.0)
        s0 = init_state(inst, sup, RunOptions(init_noise=0.0))
        s1 = iterate(s0, inst, sup)
        assert np.array_equal(s1.chi_plus_dir, s0.chi_plus_dir)
        assert np.array_equal(s1.u_hat, s0.u_hat)
        assert np.array_equal(s1.v_hat, s0.v_hat)

    def test_sigma_v_identity(self, small_supervised):
        inst, sup = small_supervised
        s = init_state(inst, sup)
        for _ in range(5):
            s = iterate(s, inst, sup)
            assert s.sigma_v * (1.0 + s.a_u) == pytest.approx(1.0, abs=1e-14)

    def test_pinned_nodes_stay_pinned(self, small_instance):
        sup = make_supervision(small_instance, 0.3, 1.0, 2)
        s = init_state(small_instance, sup)
        truth = small_instance.labels[sup.revealed]
        for _ in range(10):
            s = iterate(s, small_instance, sup)
            assert np.array_equal(s.u_hat[sup.revealed], truth.astype(float))

    def test_marginals_in_unit_interval(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup, RunOptions(max_iters=20))
        assert np.all((fp.marginals >= 0) & (fp.marginals <= 1))
        assert np.all((fp.state.chi_plus_dir >= 0) & (fp.state.chi_plus_dir <= 1))

    def test_damping_reaches_same_fixed_point(self, small_supervised):
        inst, sup = small_supervised
        a = run(inst, sup, RunOptions(max_iters=400, msg_tol=1e-9))
        b = run(inst, sup, RunOptions(max_iters=400, msg_tol=1e-9, damping=0.3))
        assert a.converged and b.converged
        np.testing.assert_allclose(a.marginals, b.marginals, atol=1e-6)


class TestSymmetries:
    @settings(max_examples=5, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(seed=st.integers(0, 2**31 - 1))
    def test_node_permutation_equivariance(self, seed):
        inst = sample_instance(ModelParams(400, 40, 5.0, 1.2, 2.0), seed % 1000)
        sup = make_supervision(inst, 0.1, 1.0, seed)
        perm = np.random.default_rng(seed).permutation(inst.n_nodes)
        opts = RunOptions(max_iters=15, init_noise=0.0, msg_tol=1e-300)
        a = run(inst, sup, opts)
        b = run(_permuted(inst, perm), sup.permuted(perm), opts)
        np.testing.assert_allclose(b.marginals[perm], a.marginals, atol=1e-8)
        np.testing.assert_allclose(b.v_hat, a.v_hat, atol=1e-8)

    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_global_sign_symmetry(self, seed):
        inst = sample_instance(ModelParams(400, 40, 5.0, 1.2, 2.0), seed % 1000)
        sup = make_supervision(inst, 0.1, 0.9, seed)
        flipped = Supervision(sup.revealed, sup.node_prior[:, ::-1].copy(), sup.observed)
        opts = RunOptions(max_iters=15, msg_tol=1e-300)
        noise = InitNoise.draw(inst.graph.n_directed, inst.n_nodes, inst.feature_dim, 1e-2, seed)
        a = run(inst, sup, opts, noise=noise)
        b = run(inst, flipped, opts, noise=-noise)
        np.testing.assert_allclose(b.u_hat, -a.u_hat, atol=1e-10)
        np.testing.assert_allclose(b.v_hat, -a.v_hat, atol=1e-10)


class TestTreeExactness:
    @pytest.mark.parametrize("seed", range(5))
    def test_tree_marginals_match_enumeration(self, seed):
        n = 6 + seed * 2
        inst, sup = _tree_instance(n, seed)
        fp = run(inst, sup, RunOptions(max_iters=200, msg_tol=1e-14, init_noise=0.0, non_edge_field=False))
        exact = exact_marginals(inst, sup, graph_model="edges_only")
        assert fp.converged
        assert np.max(np.abs(fp.marginals - exact.prob_plus)) < 1e-8

    def test_forest_with_isolated_nodes(self):
        g = Graph.from_edges(5, [(0, 1), (1, 2)])
        params = ModelParams(5, 1, 2.0, 0.5, 0.0)
        inst = Instance(g, np.zeros((5, 1)), np.zeros(5, dtype=np.int64), np.zeros(1), params, 0)
        prior = np.array([0.9, 0.5, 0.5, 0.3, 0.5])
        sup = Supervision(np.zeros(0, dtype=np.int64), np.stack([prior, 1 - prior], 1), np.full(5, -1))
        fp = run(inst, sup, RunOptions(msg_tol=1e-14, init_noise=0.0, non_edge_field=False))
        exact = exact_marginals(inst, sup, graph_model="edges_only")
        np.testing.assert_allclose(fp.marginals, exact.prob_plus, atol=1e-10)
        assert fp.marginals[3] == pytest.approx(0.3)
        assert fp.marginals[4] == pytest.approx(0.5)


class TestRun:
    def test_overlap_criterion_needs_truth(self, small_supervised):
        inst, sup = small_supervised
        with pytest.raises(InvalidParameterError):
            run(inst, sup, RunOptions(criterion="overlap"))

    def test_overlap_criterion_trace(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup, RunOptions(criterion="overlap"), truth=inst.labels)
        assert fp.converged
        assert fp.iters_used >= 2
        assert len(fp.overlap_trace) == fp.iters_used
        assert abs(fp.overlap_trace[-1] - fp.overlap_trace[-2]) < 1e-3

    def test_semi_supervised_recovers_signal(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup)
        assert overlap(fp.hard_labels, inst.labels, test_mask=sup.test_mask) > 0.5

    def test_no_signal_overlap_near_zero(self):
        inst = sample_instance(ModelParams(10_000, 1000, 5.0, 0.0, 0.0), 2)
        fp, sup, q = amp_bp.solve(inst, 0.0, seed=2)
        assert q < 3 / math.sqrt(10_000)

    def test_warm_start_from_fixed_point(self, small_supervised):
        inst, sup = small_supervised
        fp = run(inst, sup, RunOptions(msg_tol=1e-8, max_iters=400))
        again = run(inst, sup, RunOptions(msg_tol=1e-8), init=fp.state)
        assert again.iters_used <= 2

    def test_multi_instance_rejected(self):
        from csbm import MultiParams, affinity_from_snr

        inst = sample_instance(MultiParams(100, 10, affinity_from_snr(5.0, 1.0, 3), (1 / 3,) * 3, 1.0), 0)
        with pytest.raises(InvalidParameterError):
            run(inst, unsupervised(100, (1 / 3,) * 3))

    def test_float32_matches_float64(self):
        a = sample_instance(ModelParams(2000, 200, 5.0, 1.2, 2.0), 1)
        b = Instance(a.graph, a.features_nm.astype(np.float32), a.groups, a.centroids, a.params, a.seed)
        sup = make_supervision(a, 0.1, 1.0, 1)
        fa, fb = run(a, sup), run(b, sup)
        assert fa.converged and fb.converged
        assert np.max(np.abs(fa.marginals - fb.marginals)) < 1e-3

    def test_iteration_time_linear_in_input_size(self):
        # the cost is O(N P + N d); at fixed P and d it is linear in N
        times = []
        sizes = [10_000, 30_000, 100_000]
        for n in sizes:
            inst = sample_instance(ModelParams(n, 100, 5.0, 1.0, 2.0), 0)
            sup = make_supervision(inst, 0.1, 1.0, 0)
            s = init_state(inst, sup)
            s = iterate(s, inst, sup)
            best = math.inf
            for _ in range(5):
                t0 = time.perf_counter()
                iterate(s, inst, sup)
                best = min(best, time.perf_counter() - t0)
            times.append(best)
        slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
        assert 0.8 <= slope <= 1.2


class TestOverlap:
    def test_perfect(self, rng):
        u = rng.choice([-1, 1], 1000)
        assert overlap(u, u) == 1.0

    def test_sign_flip(self, rng):
        u = rng.choice([-1, 1], 1000)
        assert overlap(-u, u) == 1.0

    def test_random_guess(self, rng):
        n = 100_000
        u = rng.choice([-1, 1], n)
        assert overlap(rng.choice([-1, 1], n), u) < 3 / math.sqrt(n)

    def test_revealed_excluded(self):
        truth = np.array([1, 1, -1, -1])
        pred = np.array([-1, 1, -1, -1])
        assert overlap(pred, truth, revealed=[0]) == 1.0
        assert overlap(pred, truth, revealed=[2]) == pytest.approx(2 * (2 / 3) - 1)

    def test_length_mismatch(self):
        with pytest.raises(InvalidParameterError):
            overlap([1, 1], [1])

    @given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=50),
           st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=50))
    def test_range(self, a, b):
        m = min(len(a), len(b))
        q = overlap(np.array(a[:m]), np.array(b[:m]))
        assert 0.0 <= q <= 1.0


class TestMse:
    def test_exact(self, rng):
        v = rng.normal(size=100)
        assert amp_bp.mse_v(v, v) == 0.0

    def test_prior_mean(self, rng):
        v = rng.normal(size=100_000)
        assert amp_bp.mse_v(np.zeros_like(v), v) == pytest.approx(1.0, abs=0.02)

    @pytest.mark.slow
    def test_high_snr_beats_prior(self):
        for seed in range(10):
            inst = sample_instance(ModelParams(30_000, 3000, 5.0, 2.0, 2.0), seed)
            fp, _, _ = amp_bp.solve(inst, 0.1, seed=seed)
            assert amp_bp.mse_v(fp.v_hat, inst.centroids) < 1.0
