"""AMP-BP for the binary balanced CSBM.

The feature side is handled by AMP on the rank-one matrix ``B`` (scalars
``A_U``, ``sigma_V`` and vectors ``B_U``, ``B_V``), the graph side by belief
propagation on the sparse edges, with non-edges summarized by a mean field
``h``. Both halves meet in the per-node log-odds field

    H_i = h~_+^i - h~_-^i = -(h_+ - h_-) + log P_i(+)/P_i(-) + 2 B_V^i

which enters every BP message leaving node ``i``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import rng as _rng
from .errors import InvalidParameterError, NonFiniteError
from .model import Affinity, Instance, Supervision

CRITERIA = ("messages", "overlap")


@dataclass(frozen=True)
class RunOptions:
    """Iteration controls.

    ``criterion="messages"`` stops when the largest change of any directed
    message or marginal falls below ``msg_tol``; ``"overlap"`` stops when the
    test overlap changes by less than ``overlap_tol`` between iterations and
    needs the ground truth. ``non_edge_field=False`` drops the mean field of
    the non-edges (the graph likelihood then only involves observed edges).
    """

    max_iters: int = 200
    msg_tol: float = 1e-6
    overlap_tol: float = 1e-3
    damping: float = 0.0
    init_noise: float = 1e-2
    seed: int = 0
    criterion: str = "messages"
    non_edge_field: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidParameterError("max_iters must be positive")
        if self.msg_tol <= 0 or self.overlap_tol <= 0:
            raise InvalidParameterError("tolerances must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise InvalidParameterError("damping must lie in [0, 1)")
        if self.init_noise < 0:
            raise InvalidParameterError("init_noise must be nonnegative")
        if self.criterion not in CRITERIA:
            raise InvalidParameterError(f"criterion must be one of {CRITERIA}")


@dataclass(frozen=True, eq=False)
class MessageState:
    chi_plus_dir: np.ndarray  # by directed slot, chi_+^{src -> dst}
    chi_plus_node: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    sigma_v: float
    a_u: float
    b_u: np.ndarray
    b_v: np.ndarray
    field_plus: float
    field_minus: float
    tilde_field: np.ndarray  # (N, 2): h~_+^i, h~_-^i
    iter: int = 0
    delta: float = math.inf

    @property
    def sigma_u(self) -> np.ndarray:
        return 1.0 - self.u_hat**2

    @property
    def node_field(self) -> np.ndarray:
        return self.tilde_field[:, 0] - self.tilde_field[:, 1]


@dataclass(frozen=True, eq=False)
class InitNoise:
    """The ``epsilon`` perturbations of the initialization."""

    directed: np.ndarray
    node: np.ndarray
    feature: np.ndarray

    @classmethod
    def draw(cls, n_directed: int, n_nodes: int, feature_dim: int, scale: float, seed: int):
        gen = _rng.generator(seed, _rng.INIT)
        return cls(
            gen.uniform(-scale, scale, n_directed),
            gen.uniform(-scale, scale, n_nodes),
            gen.uniform(-scale, scale, feature_dim),
        )

    def __neg__(self):
        return InitNoise(-self.directed, -self.node, -self.feature)


@dataclass(frozen=True, eq=False)
class FixedPoint:
    state: MessageState
    converged: bool
    iters_used: int
    hard_labels: np.ndarray
    overlap_trace: np.ndarray | None = None
    delta_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seconds: float = 0.0
    affinity: Affinity | None = None
    mu: float | None = None

    @property
    def marginals(self) -> np.ndarray:
        return self.state.chi_plus_node

    @property
    def u_hat(self) -> np.ndarray:
        return self.state.u_hat

    @property
    def v_hat(self) -> np.ndarray:
        return self.state.v_hat


def _require_binary(instance: Instance):
    if not instance.is_binary:
        raise InvalidParameterError("AMP-BP needs a binary instance; use csbm.multi for r > 2")


def _check_affinity(affinity: Affinity):
    if affinity.num_groups != 2 or affinity.matrix[0, 0] != affinity.matrix[1, 1]:
        raise InvalidParameterError("binary AMP-BP needs C = [[c_in, c_out], [c_out, c_in]]")
    if affinity.c_in <= 0 and affinity.c_out <= 0:
        return
    if min(affinity.c_in, affinity.c_out) < 0:
        raise InvalidParameterError("affinities must be nonnegative")


def log_prior_ratio(supervision: Supervision) -> np.ndarray:
    """``log P_i(+) - log P_i(-)``, infinite for pinned nodes."""
    p = supervision.node_prior_plus
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def init_state(instance: Instance, supervision: Supervision, options: RunOptions = RunOptions(),
               noise: InitNoise | None = None) -> MessageState:
    """Prior plus small uniform noise on every message, ``u_hat`` and ``v_hat``."""
    _require_binary(instance)
    g = instance.graph
    n, p = instance.n_nodes, instance.feature_dim
    if noise is None:
        noise = InitNoise.draw(g.n_directed, n, p, options.init_noise, options.seed)
    prior = supervision.node_prior_plus
    chi_dir = np.clip(prior[g.src] + noise.directed, 0.0, 1.0)
    u_hat = np.clip(2.0 * prior - 1.0 + noise.node, -1.0, 1.0)
    v_hat = np.array(noise.feature, dtype=np.float64)
    return MessageState(
        chi_plus_dir=chi_dir,
        chi_plus_node=(1.0 + u_hat) / 2.0,
        u_hat=u_hat,
        v_hat=v_hat,
        sigma_v=1.0,
        a_u=0.0,
        b_u=np.zeros(p),
        b_v=np.zeros(n),
        field_plus=0.0,
        field_minus=0.0,
        tilde_field=np.zeros((n, 2)),
        iter=0,
    )


def _matvec(features_nm: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``B^T``-side product ``features_nm @ x`` (length N) without upcasting ``B``."""
    return np.asarray(features_nm @ x.astype(features_nm.dtype, copy=False), dtype=np.float64)


def _rmatvec(features_nm: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``B @ y`` (length P) computed as ``y @ features_nm``."""
    return np.asarray(y.astype(features_nm.dtype, copy=False) @ features_nm, dtype=np.float64)


def _finite(name, arr, it):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name, it)


def amp_update(u_hat, v_hat, features_nm, mu, it=None):
    """AMP half-step on the features: returns ``(a_u, b_u, v_new, sigma_v, b_v)``."""
    n, p = features_nm.shape
    alpha = n / p
    sigma_u = 1.0 - u_hat * u_hat
    a_u = mu / n * float(np.dot(u_hat, u_hat))
    scale = math.sqrt(mu / n)
    b_u = scale * _rmatvec(features_nm, u_hat) - (mu / n) * float(sigma_u.sum()) * v_hat
    _finite("B_U", b_u, it)
    v_new = b_u / (1.0 + a_u)
    sigma_v = 1.0 / (1.0 + a_u)
    b_v = scale * _matvec(features_nm, v_new) - (mu / alpha) * sigma_v * u_hat
    _finite("B_V", b_v, it)
    return a_u, b_u, v_new, sigma_v, b_v


def iterate(state: MessageState, instance: Instance, supervision: Supervision,
            affinity: Affinity | None = None, mu: float | None = None,
            options: RunOptions = RunOptions(), _work=None) -> MessageState:
    """One synchronous AMP-BP iteration; returns a new state."""
    affinity = instance.affinity if affinity is None else affinity
    mu = instance.mu if mu is None else float(mu)
    g = instance.graph
    n = instance.n_nodes
    c_in, c_out = affinity.c_in, affinity.c_out
    it = state.iter

    a_u, b_u, v_new, sigma_v, b_v = amp_update(state.u_hat, state.v_hat, instance.features_nm, mu, it)

    if options.non_edge_field:
        m = float(state.u_hat.mean())
        h_plus = 0.5 * (c_in + c_out) + 0.5 * (c_in - c_out) * m
        h_minus = 0.5 * (c_in + c_out) - 0.5 * (c_in - c_out) * m
    else:
        h_plus = h_minus = 0.0
    p_plus = supervision.node_prior_plus
    with np.errstate(divide="ignore"):
        tilde = np.empty((n, 2))
        tilde[:, 0] = -h_plus + np.log(p_plus) + b_v
        tilde[:, 1] = -h_minus + np.log1p(-p_plus) - b_v
    node_field = (h_minus - h_plus) + log_prior_ratio(supervision) + 2.0 * b_v
    if np.any(np.isnan(node_field)):
        raise NonFiniteError("node field", it)

    chi_new = np.empty_like(state.chi_plus_dir)
    marg = np.empty(n)
    scratch = np.empty(g.n_directed) if _work is None else _work
    delta = _kernels.bp_sweep(
        state.chi_plus_dir, chi_new, marg, scratch, g.indptr, g.rev, node_field,
        float(c_in), float(c_out), float(options.damping),
    )
    _finite("BP messages", chi_new, it)
    _finite("marginals", marg, it)
    delta = max(delta, float(np.max(np.abs(marg - state.chi_plus_node))) if n else 0.0)
    return MessageState(
        chi_plus_dir=chi_new,
        chi_plus_node=marg,
        u_hat=2.0 * marg - 1.0,
        v_hat=v_new,
        sigma_v=sigma_v,
        a_u=a_u,
        b_u=b_u,
        b_v=b_v,
        field_plus=h_plus,
        field_minus=h_minus,
        tilde_field=tilde,
        iter=it + 1,
        delta=delta,
    )


def hard_labels(u_hat: np.ndarray) -> np.ndarray:
    """``sign(u_hat)`` with ``sign(0) = +1``."""
    return np.where(u_hat >= 0, 1, -1).astype(np.int8)


def run(instance: Instance, supervision: Supervision, options: RunOptions = RunOptions(), *,
        affinity: Affinity | None = None, mu: float | None = None, truth=None,
        init: MessageState | None = None, noise: InitNoise | None = None,
        callback=None) -> FixedPoint:
    """Iterate AMP-BP to a fixed point (or ``max_iters``).

    ``truth`` (``+-1`` labels) enables the overlap trace and the overlap
    criterion. ``init`` warm-starts from a previous state.
    """
    _require_binary(instance)
    affinity = instance.affinity if affinity is None else affinity
    _check_affinity(affinity)
    mu = instance.mu if mu is None else float(mu)
    if options.criterion == "overlap" and truth is None:
        raise InvalidParameterError("the overlap criterion needs the ground truth")
    t0 = time.perf_counter()
    state = init_state(instance, supervision, options, noise) if init is None else replace(init, iter=0)
    test = supervision.test_mask
    scratch = np.empty(instance.graph.n_directed)
    q_trace, d_trace = [], []
    q_prev = None
    converged = False
    for _ in range(options.max_iters):
        state = iterate(state, instance, supervision, affinity, mu, options, scratch)
        d_trace.append(state.delta)
        if truth is not None:
            q = overlap(hard_labels(state.u_hat), truth, test_mask=test)
            q_trace.append(q)
        if callback is not None:
            callback(state)
        if options.criterion == "messages":
            converged = state.delta < options.msg_tol
        else:
            converged = q_prev is not None and abs(q - q_prev) < options.overlap_tol
            q_prev = q
        if converged:
            break
    return FixedPoint(
        state=state,
        converged=converged,
        iters_used=state.iter,
        hard_labels=hard_labels(state.u_hat),
        overlap_trace=np.array(q_trace) if truth is not None else None,
        delta_trace=np.array(d_trace),
        seconds=time.perf_counter() - t0,
        affinity=affinity,
        mu=mu,
    )


def overlap(labels, truth, revealed=None, *, test_mask=None) -> float:
    """Test overlap ``q_U = 2 q^ - 1``, with ``q^`` the best agreement over a global sign flip."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if labels.shape != truth.shape:
        raise InvalidParameterError("labels and truth differ in length")
    if test_mask is None:
        test_mask = np.ones(truth.shape[0], dtype=bool)
        if revealed is not None:
            test_mask[np.asarray(revealed, dtype=np.int64)] = False
    n_test = int(test_mask.sum())
    if n_test == 0:
        raise InvalidParameterError("overlap is undefined without test nodes")
    agree = int(np.sum(labels[test_mask] == truth[test_mask]))
    q_hat = max(agree, n_test - agree) / n_test
    return 2.0 * q_hat - 1.0


def mse_v(v_hat, v_truth) -> float:
    v_hat, v_truth = np.asarray(v_hat, float), np.asarray(v_truth, float)
    if v_hat.shape != v_truth.shape:
        raise InvalidParameterError("v_hat and v_truth differ in length")
    return float(np.mean((v_hat - v_truth) ** 2))


def solve(instance: Instance, rho: float = 0.0, keep_prob: float = 1.0, seed: int = 0,
          options: RunOptions | None = None, **kw):
    """Convenience: supervision + run + test overlap. Returns ``(fixed_point, supervision, q_U)``."""
    from .model import make_supervision

    sup = make_supervision(instance, rho, keep_prob, seed)
    options = options or RunOptions(seed=seed)
    fp = run(instance, sup, options, truth=instance.labels, **kw)
    return fp, sup, overlap(fp.hard_labels, instance.labels, test_mask=sup.test_mask)
