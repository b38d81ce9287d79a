"""Reference computations that do not share code with the message-passing solvers.

* :func:`exact_marginals` enumerates all ``2^N`` label vectors (``N <= 16``)
  with the centroid ``v`` integrated out in closed form.
* :func:`mcmc_marginals` samples the joint posterior of ``(u, v)`` with an
  exact Gibbs step on ``v`` and Metropolis flips of single labels.
* :func:`logistic_baseline` is an L2-regularized logistic regression on the
  features of the revealed nodes, ignoring the graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from . import rng as _rng
from .amp_bp import hard_labels, overlap
from .errors import InvalidParameterError
from .model import Affinity, Instance, Supervision

MAX_ENUM_NODES = 16


@dataclass(frozen=True, eq=False)
class MarginalTable:
    prob_plus: np.ndarray

    @property
    def hard_labels(self) -> np.ndarray:
        return hard_labels(2.0 * self.prob_plus - 1.0)


@dataclass(frozen=True, eq=False)
class Posterior:
    """Full enumerated posterior: ``states[k]`` in ``{-1, +1}^N`` with probability ``probs[k]``."""

    states: np.ndarray
    log_weights: np.ndarray
    log_evidence: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_weights - self.log_evidence)

    def marginals(self) -> MarginalTable:
        w = self.probs
        # ratio of sums keeps symmetric posteriors at exactly 1/2
        return MarginalTable((w @ (self.states > 0).astype(np.float64)) / w.sum())


def all_states(n: int) -> np.ndarray:
    """Every ``u`` in ``{-1, +1}^n``; row ``k`` has ``u_i = +1`` iff bit ``i`` of ``k`` is set."""
    k = np.arange(2**n, dtype=np.int64)[:, None]
    bits = (k >> np.arange(n, dtype=np.int64)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def _xlogy(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x == 0, 0.0, x * np.log(y))


def graph_loglik(states: np.ndarray, edges: np.ndarray, affinity: Affinity, n: int,
                 graph_model: str = "full") -> np.ndarray:
    """``log P(A | u)`` for each row of ``states``.

    ``graph_model="edges_only"`` keeps only the factors ``C[u_i, u_j]`` of the
    observed edges, the model that BP without the non-edge field is exact for.
    """
    c_in, c_out = affinity.c_in, affinity.c_out
    s = states.astype(np.int64)
    same = (s[:, edges[:, 0]] == s[:, edges[:, 1]]).sum(axis=1) if len(edges) else np.zeros(len(s), int)
    e_in, e_out = same, len(edges) - same
    if graph_model == "edges_only":
        return _xlogy(e_in, c_in) + _xlogy(e_out, c_out)
    if graph_model != "full":
        raise InvalidParameterError("graph_model must be 'full' or 'edges_only'")
    n_plus = (s > 0).sum(axis=1)
    n_minus = n - n_plus
    pairs_in = n_plus * (n_plus - 1) // 2 + n_minus * (n_minus - 1) // 2
    pairs_out = n_plus * n_minus
    p_in, p_out = c_in / n, c_out / n
    return (_xlogy(e_in, p_in) + _xlogy(e_out, p_out)
            + _xlogy(pairs_in - e_in, 1.0 - p_in) + _xlogy(pairs_out - e_out, 1.0 - p_out))


def feature_loglik(features_nm: np.ndarray, states: np.ndarray, mu: float) -> np.ndarray:
    """``sum_beta log P(B_beta | u)`` with ``v_beta ~ N(0, 1)`` integrated out.

    Each row ``B_beta`` is Gaussian with covariance ``I + (mu/N) u u^T``; since
    ``u^T u = N`` its determinant is ``1 + mu`` and its inverse follows from
    the rank-one update formula.
    """
    n, p = features_nm.shape
    feats = np.asarray(features_nm, dtype=np.float64)
    proj = states.astype(np.float64) @ feats  # (S, P): B_beta . u
    quad = float(np.sum(feats * feats)) - (mu / n) / (1.0 + mu) * np.sum(proj * proj, axis=1)
    return -0.5 * quad - 0.5 * p * math.log1p(mu) - 0.5 * n * p * math.log(2 * math.pi)


def prior_loglik(states: np.ndarray, supervision: Supervision) -> np.ndarray:
    p = supervision.node_prior_plus
    with np.errstate(divide="ignore"):
        lp, lm = np.log(p), np.log1p(-p)
    return np.where(states > 0, lp[None, :], lm[None, :]).sum(axis=1)


def exact_posterior(instance: Instance, supervision: Supervision, *, affinity: Affinity | None = None,
                    mu: float | None = None, graph_model: str = "full") -> Posterior:
    n = instance.n_nodes
    if n > MAX_ENUM_NODES:
        raise InvalidParameterError(f"enumeration is limited to N <= {MAX_ENUM_NODES} (got {n})")
    if not instance.is_binary:
        raise InvalidParameterError("enumeration supports the binary model only")
    affinity = instance.affinity if affinity is None else affinity
    mu = instance.mu if mu is None else float(mu)
    states = all_states(n)
    logw = (graph_loglik(states, instance.graph.edges, affinity, n, graph_model)
            + feature_loglik(instance.features_nm, states, mu)
            + prior_loglik(states, supervision))
    return Posterior(states, logw, float(logsumexp(logw)))


def exact_marginals(instance: Instance, supervision: Supervision, **kw) -> MarginalTable:
    """Exact ``P(u_i = +1 | A, B)`` by enumeration (``N <= 16``)."""
    return exact_posterior(instance, supervision, **kw).marginals()


@dataclass(frozen=True)
class McmcOptions:
    sweeps: int = 100_000
    burn_in: int = 10_000
    seed: int = 0
    record_states: bool = False  # histogram of visited states, N <= 16 only

    def __post_init__(self):
        if self.sweeps < 1 or self.burn_in < 0:
            raise InvalidParameterError("sweeps must be positive and burn_in nonnegative")
        if self.burn_in >= self.sweeps:
            raise InvalidParameterError("burn_in must be smaller than sweeps")


@dataclass(frozen=True, eq=False)
class McmcResult:
    table: MarginalTable
    hard_labels: np.ndarray
    acceptance: float
    state_counts: np.ndarray | None
    final_u: np.ndarray
    final_v: np.ndarray

    @property
    def prob_plus(self) -> np.ndarray:
        return self.table.prob_plus


def mcmc_marginals(instance: Instance, supervision: Supervision, options: McmcOptions = McmcOptions(),
                   *, affinity: Affinity | None = None, mu: float | None = None,
                   backend: str | None = None, batch_bytes: int = 1 << 23) -> McmcResult:
    """Metropolis-within-Gibbs estimate of the posterior marginals.

    Noiselessly revealed nodes are frozen at their label. The hard estimate
    is ``sign(sum_t u_i^t)`` over the kept sweeps.
    """
    if not instance.is_binary:
        raise InvalidParameterError("MCMC supports the binary model only")
    affinity = instance.affinity if affinity is None else affinity
    mu = instance.mu if mu is None else float(mu)
    kern = _kernels if backend is None else _kernels.backends()[backend]
    n, p = instance.n_nodes, instance.feature_dim
    if options.record_states and n > MAX_ENUM_NODES:
        raise InvalidParameterError("state histograms are limited to N <= 16")

    gen = _rng.generator(options.seed, _rng.MCMC)
    prior = supervision.node_prior_plus
    frozen = (prior == 0.0) | (prior == 1.0)
    with np.errstate(divide="ignore"):
        llr = np.where(frozen, 0.0, np.log(prior) - np.log1p(-prior))
    u = np.where(gen.random(n) < 0.5, 1, -1).astype(np.int8)
    u[prior == 1.0] = 1
    u[prior == 0.0] = -1
    v = np.zeros(p)
    feats = np.ascontiguousarray(instance.features_nm, dtype=np.float64)
    plus = np.zeros(n, dtype=np.int64)
    hist = np.zeros(2**n if options.record_states else 0, dtype=np.int64)
    per_sweep = 8 * (n + p)
    batch = max(1, batch_bytes // per_sweep)
    done = accepted = 0
    while done < options.sweeps:
        k = min(batch, options.sweeps - done)
        normals = gen.standard_normal((k, p))
        uniforms = gen.random((k, n))
        accepted += kern.mcmc_chain(
            u, v, feats, instance.graph.indptr, instance.graph.src, llr,
            frozen.astype(np.uint8), normals, uniforms, mu,
            float(affinity.c_in), float(affinity.c_out), done, options.burn_in, plus, hist,
        )
        done += k
    kept = options.sweeps - options.burn_in
    prob = plus / kept
    n_free = int((~frozen).sum())
    return McmcResult(
        table=MarginalTable(prob),
        hard_labels=hard_labels(2.0 * prob - 1.0),
        acceptance=accepted / max(1, n_free * options.sweeps),
        state_counts=hist if options.record_states else None,
        final_u=u,
        final_v=v,
    )


DEFAULT_L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass(frozen=True, eq=False)
class LogisticResult:
    q_u: float
    l2: float
    weights: np.ndarray
    intercept: float
    validation_accuracy: dict


def _fit_logistic(x, y, l2, steps, lr):
    """Full-batch gradient descent on the mean logistic loss plus ``l2/2 |w|^2`` (intercept free)."""
    m, p = x.shape
    w = np.zeros(p, dtype=x.dtype)
    b = 0.0
    for _ in range(steps):
        z = x @ w + b
        # d/dz log(1 + exp(-y z)) = -y * sigmoid(-y z)
        g = -y * np.exp(-np.logaddexp(0.0, y * z))
        gw = (g @ x) / m + l2 * w
        w -= lr * gw
        b -= lr * float(g.mean())
    return w, b


def logistic_baseline(instance: Instance, supervision: Supervision, l2_grid=DEFAULT_L2_GRID, *,
                      steps: int = 2000, seed: int = 0, holdout: float = 0.2) -> LogisticResult:
    """Logistic regression on revealed features; regularization picked on a held-out split."""
    revealed = supervision.revealed
    if len(revealed) == 0:
        raise InvalidParameterError("logistic regression needs at least one revealed node")
    if not instance.is_binary:
        raise InvalidParameterError("logistic baseline supports the binary model only")
    grid = [float(a) for a in l2_grid]
    if not grid or min(grid) < 0:
        raise InvalidParameterError("l2_grid must be a nonempty list of nonnegative values")
    feats = np.asarray(instance.features_nm, dtype=np.float64)
    x = feats[revealed]
    y = (1 - 2 * supervision.observed[revealed]).astype(np.float64)

    gen = _rng.generator(seed, _rng.LOGISTIC)
    order = gen.permutation(len(revealed))
    n_val = int(round(holdout * len(revealed)))
    if len(grid) > 1 and 0 < n_val < len(revealed):
        val, tr = order[:n_val], order[n_val:]
        acc = {}
        for l2 in grid:
            w, b = _fit_logistic(x[tr], y[tr], l2, steps, 0.1 / (1.0 + l2))
            acc[l2] = float(np.mean(np.where(x[val] @ w + b >= 0, 1.0, -1.0) == y[val]))
        best = max(grid, key=lambda a: (acc[a], a))
    else:
        acc, best = {}, grid[0]
    w, b = _fit_logistic(x, y, best, steps, 0.1 / (1.0 + best))
    pred = np.where(feats @ w + b >= 0, 1, -1).astype(np.int8)
    q = overlap(pred, instance.labels, test_mask=supervision.test_mask)
    return LogisticResult(q, best, w, b, acc)
