"""Timing of the compiled kernels against their numpy/Python fallbacks."""
from __future__ import annotations

import time

import numpy as np

from . import _kernels
from .model import ModelParams, make_supervision, sample_instance


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_bp_sweep(n_nodes=100_000, avg_degree=5.0, repeats=5, seed=0):
    """Seconds per BP sweep for each available backend."""
    params = ModelParams(n_nodes, 1, avg_degree, 1.0, 0.0)
    inst = sample_instance(params, seed)
    g = inst.graph
    gen = np.random.default_rng(seed)
    chi = gen.random(g.n_directed)
    field = gen.normal(size=n_nodes)
    aff = params.affinity
    out = {}
    for name, mod in _kernels.backends().items():
        new, marg, scratch = np.empty_like(chi), np.empty(n_nodes), np.empty(g.n_directed)
        out[name] = _best_of(
            lambda: mod.bp_sweep(chi, new, marg, scratch, g.indptr, g.rev, field, aff.c_in, aff.c_out, 0.0),
            repeats,
        )
    return {"kernel": "bp_sweep", "size": f"N={n_nodes} d={avg_degree}", **out}


def bench_mcmc(n_nodes=2000, alpha=10.0, sweeps=20, repeats=3, seed=0):
    """Seconds per MCMC sweep (Gibbs step plus one Metropolis pass) for each backend."""
    params = ModelParams.from_alpha(n_nodes, alpha, avg_degree=5.0, snr_lambda=1.0, snr_mu=2.0)
    inst = sample_instance(params, seed)
    sup = make_supervision(inst, 0.1, 1.0, seed)
    g = inst.graph
    gen = np.random.default_rng(seed)
    p = inst.feature_dim
    normals = gen.standard_normal((sweeps, p))
    uniforms = gen.random((sweeps, n_nodes))
    prior = sup.node_prior_plus
    frozen = ((prior == 0) | (prior == 1)).astype(np.uint8)
    llr = np.zeros(n_nodes)
    feats = np.ascontiguousarray(inst.features_nm)
    out = {}
    for name, mod in _kernels.backends().items():
        def go():
            u = inst.labels.copy()
            mod.mcmc_chain(u, np.zeros(p), feats, g.indptr, g.src, llr, frozen, normals, uniforms,
                           2.0, params.affinity.c_in, params.affinity.c_out, 0, 0,
                           np.zeros(n_nodes, dtype=np.int64), np.zeros(0, dtype=np.int64))
        out[name] = _best_of(go, repeats) / sweeps
    return {"kernel": "mcmc_sweep", "size": f"N={n_nodes} P={p}", **out}


def run_all(quick: bool = False):
    if quick:
        return [bench_bp_sweep(20_000, repeats=3), bench_mcmc(500, sweeps=5, repeats=2)]
    return [bench_bp_sweep(), bench_mcmc()]


def format_rows(rows) -> str:
    lines = [f"{'kernel':<12} {'size':<18} {'python [s]':>12} {'cython [s]':>12} {'speedup':>8}"]
    for r in rows:
        py, cy = r.get("python"), r.get("cython")
        cy_s = f"{cy:12.3e}" if cy is not None else f"{'n/a':>12}"
        sp = f"{py / cy:8.1f}" if cy else f"{'n/a':>8}"
        lines.append(f"{r['kernel']:<12} {r['size']:<18} {py:12.3e} {cy_s} {sp}")
    return "\n".join(lines)
