"""Pure numpy/Python versions of the compiled kernels (same signatures and semantics)."""
from __future__ import annotations

import math

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bp_sweep(chi_old, chi_new, marg, scratch, indptr, rev, field, c_in, c_out, damping):
    n = indptr.shape[0] - 1
    dc = c_in - c_out
    a = np.maximum(c_out + dc * chi_old, 1e-300)
    b = np.maximum(c_in - dc * chi_old, 1e-300)
    llr = np.log(a / b)
    scratch[:] = llr
    dst = np.repeat(np.arange(n), np.diff(indptr))
    total = field + np.bincount(dst, weights=llr, minlength=n)
    marg[:] = _sigmoid(total)
    new = np.empty_like(chi_old)
    new[rev] = _sigmoid(total[dst] - llr)
    if damping != 0.0:
        new = (1.0 - damping) * new + damping * chi_old
    delta = float(np.max(np.abs(new - chi_old))) if new.size else 0.0
    chi_new[:] = new
    return delta


def mcmc_chain(u, v, feats, indptr, src, prior_llr, frozen, normals, uniforms,
               mu, c_in, c_out, sweep0, burn_in, plus_counts, hist):
    n, p = feats.shape
    scale = math.sqrt(mu / n) if n else 0.0
    post_sd = 1.0 / math.sqrt(1.0 + mu)
    edge_lr = nonedge_lr = 0.0
    if c_in != c_out:
        edge_lr = math.log(c_out / c_in)
        nonedge_lr = math.log1p(-c_out / n) - math.log1p(-c_in / n)
    neigh = [src[indptr[i]:indptr[i + 1]] for i in range(n)]
    movable = [i for i in range(n) if not frozen[i]]
    n_plus = int(np.sum(u > 0))
    accepted = 0
    f = np.zeros(n)
    for s in range(normals.shape[0]):
        if mu > 0:
            uf = u.astype(np.float64)
            v[:] = scale * (uf @ feats) / (1.0 + mu) + post_sd * normals[s]
            f = scale * (feats @ v)
        else:
            v[:] = post_sd * normals[s]
        us = u.tolist()
        row = uniforms[s]
        for i in movable:
            ui = us[i]
            nb = neigh[i]
            deg = len(nb)
            nb_same = sum(1 for k in nb if us[k] == ui)
            nb_opp = deg - nb_same
            n_same = n_plus if ui > 0 else n - n_plus
            n_opp = n - n_same
            delta = -ui * prior_llr[i] - 2.0 * ui * f[i]
            delta += (nb_same - nb_opp) * edge_lr
            delta += ((n_same - 1 - nb_same) - (n_opp - nb_opp)) * nonedge_lr
            if delta >= 0 or row[i] < math.exp(delta):
                us[i] = -ui
                n_plus += 1 if ui < 0 else -1
                accepted += 1
        u[:] = us
        if sweep0 + s >= burn_in:
            plus = u > 0
            plus_counts += plus
            if hist.shape[0]:
                hist[int(np.dot(plus, 1 << np.arange(n, dtype=np.int64)))] += 1
    return accepted
