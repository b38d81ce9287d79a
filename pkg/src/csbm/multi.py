"""AMP-BP for ``r`` possibly unbalanced communities.

Labels are one-hot vectors, centroids ``v_beta`` live in ``R^r`` and the
Onsager terms become ``r x r`` matrices. BP messages are probability vectors
over the groups and are combined in the log domain; a zero factor (possible
when ``C`` has zero entries) is tracked by count so that cavity sums never
compute ``-inf - (-inf)``.

With ``centroid_cov = [[1, -1], [-1, 1]]`` and two balanced groups the
iteration is algebraically the binary AMP-BP of :mod:`csbm.amp_bp`.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linear_sum_assignment

from . import rng as _rng
from .amp_bp import RunOptions
from .errors import InvalidParameterError, NonFiniteError
from .model import Affinity, Instance, Supervision

EXACT_PERMUTATION_MAX_R = 8


@dataclass(frozen=True, eq=False)
class MultiState:
    chi_dir: np.ndarray  # (2E, r), chi^{src -> dst}
    chi_node: np.ndarray  # (N, r)
    u_hat: np.ndarray  # (N, r)
    v_hat: np.ndarray  # (P, r)
    sigma_v: np.ndarray
    a_u: np.ndarray
    a_v: np.ndarray
    b_u: np.ndarray
    b_v: np.ndarray
    field: np.ndarray  # h_s
    iter: int = 0
    delta: float = math.inf

    @property
    def sigma_u(self) -> np.ndarray:
        """Per-node ``diag(u_hat_i) - u_hat_i u_hat_i^T``, shape ``(N, r, r)``."""
        u = self.u_hat
        return np.einsum("is,st->ist", u, np.eye(u.shape[1])) - u[:, :, None] * u[:, None, :]


@dataclass(frozen=True, eq=False)
class MultiResult:
    state: MultiState
    converged: bool
    iters_used: int
    hard_labels: np.ndarray
    overlap_trace: np.ndarray | None = None
    delta_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seconds: float = 0.0

    @property
    def marginals(self) -> np.ndarray:
        return self.state.chi_node


def _centroid_factor(cov, r):
    """``L`` with ``L L^T = cov`` (columns for the positive eigenvalues only)."""
    if cov is None:
        return np.eye(r)
    w, q = np.linalg.eigh(np.asarray(cov, dtype=np.float64))
    keep = w > 1e-12 * max(1.0, w.max())
    return q[:, keep] * np.sqrt(w[keep])


def sigma_v_matrix(a_u: np.ndarray, factor: np.ndarray) -> np.ndarray:
    """Posterior covariance ``cov (I + A_U cov)^{-1}`` of a centroid row, in the SPD form
    ``L (I + L^T A_U L)^{-1} L^T``."""
    k = factor.shape[1]
    m = np.eye(k) + factor.T @ a_u @ factor
    s = factor @ cho_solve(cho_factor(m), factor.T)
    return 0.5 * (s + s.T)


def _prior_matrix(supervision: Supervision, r: int) -> np.ndarray:
    prior = supervision.node_prior
    if prior.shape[1] != r:
        raise InvalidParameterError(f"supervision has {prior.shape[1]} groups, the model has {r}")
    return prior


def _normalize_simplex(x):
    x = np.clip(x, 0.0, None)
    s = x.sum(axis=1, keepdims=True)
    return np.where(s > 0, x / np.where(s > 0, s, 1.0), 1.0 / x.shape[1])


def init_multi(instance: Instance, supervision: Supervision, options: RunOptions = RunOptions()) -> MultiState:
    """Messages at the prior plus zero-mean noise; ``u_hat`` at the prior mean; ``v_hat`` at noise."""
    g = instance.graph
    n, p, r = instance.n_nodes, instance.feature_dim, instance.num_groups
    prior = _prior_matrix(supervision, r)
    gen = _rng.generator(options.seed, _rng.INIT)
    eps = gen.uniform(-options.init_noise, options.init_noise, (g.n_directed, r))
    eps -= eps.mean(axis=1, keepdims=True)
    chi_dir = _normalize_simplex(prior[g.src] + eps)
    v_hat = gen.uniform(-options.init_noise, options.init_noise, (p, r))
    z = np.zeros((r, r))
    return MultiState(
        chi_dir=chi_dir, chi_node=prior.copy(), u_hat=prior.copy(), v_hat=v_hat,
        sigma_v=np.eye(r), a_u=z, a_v=z, b_u=np.zeros((p, r)), b_v=np.zeros((n, r)),
        field=np.zeros(r), iter=0,
    )


def matched_init_from_binary(binary_state) -> MultiState:
    """The ``r = 2`` state equivalent to a binary AMP-BP state (group 0 is ``+1``).

    Uses ``u_hat = (chi, 1 - chi)`` with ``chi = (1 + u_hat_binary)/2`` and
    ``v_hat = v_hat_binary * (1, -1)``.
    """
    chi_dir = np.stack([binary_state.chi_plus_dir, 1.0 - binary_state.chi_plus_dir], axis=1)
    chi = (1.0 + binary_state.u_hat) / 2.0
    node = np.stack([chi, 1.0 - chi], axis=1)
    v = np.stack([binary_state.v_hat, -binary_state.v_hat], axis=1)
    n, p = node.shape[0], v.shape[0]
    z = np.zeros((2, 2))
    return MultiState(chi_dir=chi_dir, chi_node=node, u_hat=node.copy(), v_hat=v, sigma_v=np.eye(2),
                      a_u=z, a_v=z, b_u=np.zeros((p, 2)), b_v=np.zeros((n, 2)), field=np.zeros(2))


def _softmax_rows(logits, what, it):
    mx = logits.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise NonFiniteError(what, it)
    e = np.exp(logits - mx)
    return e / e.sum(axis=1, keepdims=True)


def iterate_multi(state: MultiState, instance: Instance, supervision: Supervision,
                  affinity: Affinity | None = None, mu: float | None = None,
                  options: RunOptions = RunOptions(), centroid_cov=None, _factor=None) -> MultiState:
    """One synchronous iteration of multi-community AMP-BP."""
    affinity = instance.affinity if affinity is None else affinity
    mu = instance.mu if mu is None else float(mu)
    if centroid_cov is None:
        centroid_cov = getattr(instance.params, "centroid_cov", None)
    c = affinity.matrix
    r = c.shape[0]
    g = instance.graph
    feats = instance.features_nm
    n, p = feats.shape
    alpha = n / p
    it = state.iter
    factor = _centroid_factor(centroid_cov, r) if _factor is None else _factor
    u, v = state.u_hat, state.v_hat
    dt = feats.dtype

    # AMP on v
    sum_sigma_u = np.diag(u.sum(axis=0)) - u.T @ u
    a_u = (mu / n) * (u.T @ u)
    scale = math.sqrt(mu / n)
    b_u = scale * np.asarray(feats.T @ u.astype(dt, copy=False), dtype=np.float64) - (mu / n) * v @ sum_sigma_u
    if not np.all(np.isfinite(b_u)):
        raise NonFiniteError("B_U", it)
    sigma_v = sigma_v_matrix(a_u, factor)
    v_new = b_u @ sigma_v
    # AMP on u
    a_v = (mu / n) * (v.T @ v)
    b_v = scale * np.asarray(feats @ v_new.astype(dt, copy=False), dtype=np.float64) - (mu / alpha) * u @ sigma_v
    if not np.all(np.isfinite(b_v)):
        raise NonFiniteError("B_V", it)

    # mean field of the non-edges
    h = (c @ state.chi_node.sum(axis=0)) / n if options.non_edge_field else np.zeros(r)
    prior = _prior_matrix(supervision, r)
    with np.errstate(divide="ignore"):
        node_log = np.log(prior) - h[None, :] + b_v - 0.5 * np.diag(a_v)[None, :]

    # BP: log of sum_u C[u, s] chi_u^{k->i} for every incoming slot
    incoming = state.chi_dir @ c
    zero = incoming <= 0.0
    with np.errstate(divide="ignore"):
        logs = np.where(zero, 0.0, np.log(np.where(zero, 1.0, incoming)))
    dst = g.dst
    tot = np.zeros((n, r))
    nzero = np.zeros((n, r), dtype=np.int64)
    for s in range(r):
        tot[:, s] = np.bincount(dst, weights=logs[:, s], minlength=n)
        nzero[:, s] = np.bincount(dst, weights=zero[:, s], minlength=n).astype(np.int64)
    marg_logits = node_log + np.where(nzero > 0, -np.inf, tot)
    marg = _softmax_rows(marg_logits, "marginals", it)
    cav_zero = (nzero[dst] - zero) > 0
    cav = np.where(cav_zero, -np.inf, tot[dst] - logs)
    new = np.empty_like(state.chi_dir)
    if g.n_directed:
        new[g.rev] = _softmax_rows(node_log[dst] + cav, "BP messages", it)
    if options.damping:
        new = (1.0 - options.damping) * new + options.damping * state.chi_dir
    delta = 0.0
    if g.n_directed:
        delta = float(np.max(np.abs(new - state.chi_dir)))
    delta = max(delta, float(np.max(np.abs(marg - state.chi_node))))
    return MultiState(
        chi_dir=new, chi_node=marg, u_hat=marg, v_hat=v_new, sigma_v=sigma_v, a_u=a_u, a_v=a_v,
        b_u=b_u, b_v=b_v, field=h, iter=it + 1, delta=delta,
    )


def hard_labels_multi(chi_node: np.ndarray) -> np.ndarray:
    """``argmax_s chi_s``, ties to the lowest group index."""
    return np.argmax(chi_node, axis=1)


def run_multi(instance: Instance, supervision: Supervision, options: RunOptions = RunOptions(), *,
              affinity: Affinity | None = None, mu: float | None = None, centroid_cov=None,
              truth=None, init: MultiState | None = None) -> MultiResult:
    """Iterate multi-community AMP-BP; ``truth`` is the vector of group indices."""
    affinity = instance.affinity if affinity is None else affinity
    r = affinity.num_groups
    if r != instance.num_groups:
        raise InvalidParameterError("affinity size differs from the instance's number of groups")
    if options.criterion == "overlap" and truth is None:
        raise InvalidParameterError("the overlap criterion needs the ground truth")
    if centroid_cov is None:
        centroid_cov = getattr(instance.params, "centroid_cov", None)
    factor = _centroid_factor(centroid_cov, r)
    t0 = time.perf_counter()
    state = init_multi(instance, supervision, options) if init is None else replace(init, iter=0)
    test = supervision.test_mask
    group_prior = np.asarray(instance.params.group_prior)
    q_trace, d_trace = [], []
    q_prev, converged = None, False
    for _ in range(options.max_iters):
        state = iterate_multi(state, instance, supervision, affinity, mu, options, centroid_cov, factor)
        d_trace.append(state.delta)
        if truth is not None:
            q = overlap_multi(hard_labels_multi(state.chi_node), truth, test_mask=test,
                              num_groups=r, group_prior=group_prior, align=supervision.rho == 0)
            q_trace.append(q)
        if options.criterion == "messages":
            converged = state.delta < options.msg_tol
        else:
            converged = q_prev is not None and abs(q - q_prev) < options.overlap_tol
            q_prev = q
        if converged:
            break
    return MultiResult(
        state=state, converged=converged, iters_used=state.iter,
        hard_labels=hard_labels_multi(state.chi_node),
        overlap_trace=np.array(q_trace) if truth is not None else None,
        delta_trace=np.array(d_trace), seconds=time.perf_counter() - t0,
    )


def confusion_matrix(labels, truth, r) -> np.ndarray:
    m = np.zeros((r, r), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(truth)), 1)
    return m


def best_agreement(labels, truth, r) -> int:
    """Largest number of matches over relabelings ``pred -> perm[pred]``."""
    conf = confusion_matrix(labels, truth, r)
    if r <= EXACT_PERMUTATION_MAX_R:
        idx = np.arange(r)
        return int(max(conf[idx, list(perm)].sum() for perm in itertools.permutations(range(r))))
    rows, cols = linear_sum_assignment(-conf)
    return int(conf[rows, cols].sum())


def overlap_multi(labels, truth, revealed=None, num_groups: int | None = None, *, test_mask=None,
                  group_prior=None, align: bool = True) -> float:
    """``(q^ - p_max) / (1 - p_max)``; ``q^`` is the test agreement, maximized over group
    permutations when ``align`` (the unsupervised case), ``p_max`` the largest prior group
    probability (or the largest test-set class when ``group_prior`` is not given)."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    r = int(num_groups) if num_groups is not None else int(max(labels.max(), truth.max()) + 1)
    if test_mask is None:
        test_mask = np.ones(truth.shape[0], dtype=bool)
        if revealed is not None:
            test_mask[np.asarray(revealed, dtype=np.int64)] = False
    n_test = int(test_mask.sum())
    if n_test == 0:
        raise InvalidParameterError("overlap is undefined without test nodes")
    lt, tt = labels[test_mask], truth[test_mask]
    agree = best_agreement(lt, tt, r) if align else int(np.sum(lt == tt))
    if group_prior is not None:
        base = float(np.max(group_prior))
    else:
        base = float(np.bincount(tt, minlength=r).max()) / n_test
    if base >= 1.0:
        return 1.0 if agree == n_test else 0.0
    return (agree / n_test - base) / (1.0 - base)
