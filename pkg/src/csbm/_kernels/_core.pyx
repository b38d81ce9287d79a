# cython: language_level=3
"""Compiled inner loops: the BP edge sweep and the Metropolis-within-Gibbs chain."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, fabs

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _edge_llr(double chi, double c_in, double c_out) nogil:
    cdef double dc = c_in - c_out
    cdef double a = c_out + dc * chi
    cdef double b = c_in - dc * chi
    if a < 1e-300:
        a = 1e-300
    if b < 1e-300:
        b = 1e-300
    return log(a / b)


def bp_sweep(const double[::1] chi_old, double[::1] chi_new, double[::1] marg,
             double[::1] scratch, const cnp.int64_t[::1] indptr,
             const cnp.int64_t[::1] rev, const double[::1] field,
             double c_in, double c_out, double damping):
    """One synchronous BP update of all directed messages and node marginals.

    ``field[i]`` is the node log-odds ``h~_+ - h~_-``. Returns the largest
    absolute change of a directed message.
    """
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, e, j
    cdef double s, x, new, delta = 0.0, keep = 1.0 - damping
    with nogil:
        for i in range(n):
            s = field[i]
            for e in range(indptr[i], indptr[i + 1]):
                scratch[e] = _edge_llr(chi_old[e], c_in, c_out)
                s = s + scratch[e]
            marg[i] = _sigmoid(s)
            for e in range(indptr[i], indptr[i + 1]):
                j = rev[e]
                new = _sigmoid(s - scratch[e])
                if damping != 0.0:
                    new = keep * new + damping * chi_old[j]
                x = fabs(new - chi_old[j])
                if x > delta:
                    delta = x
                chi_new[j] = new
    return delta


def mcmc_chain(signed char[::1] u, double[::1] v, const double[:, ::1] feats,
               const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] src,
               const double[::1] prior_llr, const unsigned char[::1] frozen,
               const double[:, ::1] normals, const double[:, ::1] uniforms,
               double mu, double c_in, double c_out,
               cnp.int64_t sweep0, cnp.int64_t burn_in,
               cnp.int64_t[::1] plus_counts, cnp.int64_t[::1] hist):
    """Run ``normals.shape[0]`` sweeps of the chain, updating ``u`` and ``v`` in place.

    Each sweep resamples ``v | u`` exactly (Gaussian) from ``normals[s]``,
    then visits nodes ``0..N-1`` once, flipping ``u_i`` when
    ``uniforms[s, i] < exp(delta)``. Sweeps with global index ``>= burn_in``
    add ``u_i == +1`` to ``plus_counts`` and, if ``hist`` is non-empty, the
    bit-encoded state (bit ``i`` set when ``u_i = +1``) to ``hist``.
    Returns the number of accepted flips.
    """
    cdef Py_ssize_t n = feats.shape[0], p = feats.shape[1]
    cdef Py_ssize_t n_sweeps = normals.shape[0]
    cdef Py_ssize_t s, i, b, e
    cdef double scale = sqrt(mu / n) if n > 0 else 0.0
    cdef double post_sd = 1.0 / sqrt(1.0 + mu)
    cdef double edge_lr = 0.0, nonedge_lr = 0.0
    cdef double acc, delta, ui
    cdef Py_ssize_t n_plus = 0, nb_same, nb_opp, n_same, n_opp, state
    cdef Py_ssize_t use_hist = hist.shape[0] > 0
    cdef cnp.int64_t accepted = 0
    cdef double[::1] f = np.zeros(n, dtype=np.float64)
    cdef double[::1] bu = np.zeros(p, dtype=np.float64)

    if c_in != c_out:
        edge_lr = log(c_out / c_in)
        nonedge_lr = log1p(-c_out / n) - log1p(-c_in / n)
    for i in range(n):
        if u[i] > 0:
            n_plus += 1

    with nogil:
        for s in range(n_sweeps):
            # Gibbs: v_b | u ~ N(scale * (B_b . u) / (1 + mu), 1 / (1 + mu))
            if mu > 0:
                for b in range(p):
                    bu[b] = 0.0
                for i in range(n):
                    ui = u[i]
                    for b in range(p):
                        bu[b] += feats[i, b] * ui
                for b in range(p):
                    v[b] = scale * bu[b] / (1.0 + mu) + post_sd * normals[s, b]
                for i in range(n):
                    acc = 0.0
                    for b in range(p):
                        acc += feats[i, b] * v[b]
                    f[i] = scale * acc
            else:
                for b in range(p):
                    v[b] = post_sd * normals[s, b]

            # Metropolis sweep over u
            for i in range(n):
                if frozen[i]:
                    continue
                ui = u[i]
                nb_same = 0
                for e in range(indptr[i], indptr[i + 1]):
                    if u[src[e]] == u[i]:
                        nb_same += 1
                nb_opp = (indptr[i + 1] - indptr[i]) - nb_same
                if u[i] > 0:
                    n_same = n_plus
                else:
                    n_same = n - n_plus
                n_opp = n - n_same
                delta = -ui * prior_llr[i] - 2.0 * ui * f[i]
                delta += (nb_same - nb_opp) * edge_lr
                delta += ((n_same - 1 - nb_same) - (n_opp - nb_opp)) * nonedge_lr
                if delta >= 0 or uniforms[s, i] < exp(delta):
                    u[i] = -u[i]
                    if u[i] > 0:
                        n_plus += 1
                    else:
                        n_plus -= 1
                    accepted += 1

            if sweep0 + s >= burn_in:
                state = 0
                for i in range(n):
                    if u[i] > 0:
                        plus_counts[i] += 1
                        if use_hist:
                            state |= (<Py_ssize_t>1) << i
                if use_hist:
                    hist[state] += 1
    return accepted
