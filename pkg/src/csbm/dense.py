"""Dense-degree limit: AMP-AMP on the transformed adjacency, and its state evolution.

When ``d = O(N)`` and ``c_in - c_out = nu sqrt(N)`` the graph acts as a noisy
rank-one matrix. With

    S_ij = (A_ij / d~ - (1 - A_ij) / (1 - d~)) / 2,    Delta_I = nu^2 / (4 d~ (1 - d~))

the matrix ``Y = (nu / sqrt N) S`` has mean ``(Delta_I / N) u u^T`` and
entry variance ``Delta_I / N`` to leading order, so AMP on ``Y`` is a spiked
Wigner AMP whose state evolution gains ``Delta_I m_u`` per step.

``Y`` is never formed for a sampled graph: ``sum_{k != i} S_ki x_k`` equals
``((A x)_i / (d~(1 - d~)) - (sum(x) - x_i) / (1 - d~)) / 2``, a sparse product
plus a rank-one correction.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtr

from . import rng as _rng
from .amp_bp import RunOptions, amp_update, hard_labels, log_prior_ratio, overlap
from .errors import InvalidParameterError, NonFiniteError, ResourceBudgetError
from .model import Instance, ModelParams, Supervision

DEFAULT_DENSE_CAP = 20_000
GH_NODES = 201


@dataclass(frozen=True)
class DenseParams:
    n_nodes: int
    feature_dim: int
    degree_fraction: float
    graph_snr: float
    feature_snr: float
    train_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.degree_fraction < 1.0:
            raise InvalidParameterError("degree_fraction must lie strictly between 0 and 1")
        if self.graph_snr < 0 or self.feature_snr < 0:
            raise InvalidParameterError("snr values must be nonnegative")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise InvalidParameterError("train_fraction must lie in [0, 1]")

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def delta_i(self) -> float:
        return delta_inverse(self.graph_snr, self.degree_fraction)

    @classmethod
    def from_sparse(cls, params: ModelParams) -> "DenseParams":
        """Matched parameters: ``d~ = d/N`` and ``nu = 2 lambda sqrt(d/N)``, so ``Delta_I = lambda^2/(1 - d~)``."""
        dt = params.avg_degree / params.n_nodes
        return cls(params.n_nodes, params.feature_dim, dt,
                   abs(2.0 * params.snr_lambda * math.sqrt(dt)), params.snr_mu, params.train_fraction)


def delta_inverse(nu: float, d_tilde: float) -> float:
    if not 0.0 < d_tilde < 1.0:
        raise InvalidParameterError("d_tilde must lie strictly between 0 and 1")
    return nu * nu / (4.0 * d_tilde * (1.0 - d_tilde))


def transform_adjacency(adjacency, d_tilde: float, nu: float = 1.0, *, cap: int = DEFAULT_DENSE_CAP):
    """Dense ``S`` (zero diagonal) and ``Delta_I`` from a 0/1 adjacency matrix."""
    if not 0.0 < d_tilde < 1.0:
        raise InvalidParameterError("d_tilde must lie strictly between 0 and 1 (S divides by d~ and 1 - d~)")
    a = adjacency.toarray() if hasattr(adjacency, "toarray") else np.asarray(adjacency)
    n = a.shape[0]
    if n > cap:
        raise ResourceBudgetError(f"dense S for N={n} exceeds the cap N <= {cap}")
    a = a.astype(np.float64)
    s = 0.5 * (a / d_tilde - (1.0 - a) / (1.0 - d_tilde))
    np.fill_diagonal(s, 0.0)
    return s, delta_inverse(nu, d_tilde)


class GraphOperator:
    """``x -> Y x`` with ``Y = (nu / sqrt N) S`` built from the sparse graph."""

    def __init__(self, instance: Instance, d_tilde: float, nu: float):
        if not 0.0 < d_tilde < 1.0:
            raise InvalidParameterError("d_tilde must lie strictly between 0 and 1")
        self.adj = instance.graph.to_scipy()
        self.n = instance.n_nodes
        self.d_tilde = d_tilde
        self.nu = nu
        self.delta_i = delta_inverse(nu, d_tilde)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        dt = self.d_tilde
        sx = 0.5 * ((self.adj @ x) / (dt * (1.0 - dt)) - (x.sum() - x) / (1.0 - dt))
        return (self.nu / math.sqrt(self.n)) * sx


class MatrixOperator:
    """``x -> Y x`` for an explicit symmetric matrix ``Y`` (zero diagonal)."""

    def __init__(self, y: np.ndarray, delta_i: float):
        self.y = y
        self.delta_i = float(delta_i)

    def __call__(self, x):
        return self.y @ x


def spiked_surrogate(labels: np.ndarray, delta_i: float, seed: int, *, cap: int = DEFAULT_DENSE_CAP) -> MatrixOperator:
    """Idealized graph channel ``Y = (Delta_I/N) u u^T + sqrt(Delta_I/N) W`` with ``W`` symmetric Gaussian."""
    u = np.asarray(labels, dtype=np.float64)
    n = u.shape[0]
    if n > cap:
        raise ResourceBudgetError(f"dense surrogate for N={n} exceeds the cap N <= {cap}")
    gen = _rng.generator(seed, _rng.INSTANCE, _rng.GRAPH)
    w = gen.standard_normal((n, n))
    w = np.triu(w, 1)
    w = w + w.T
    y = (delta_i / n) * np.outer(u, u) + math.sqrt(delta_i / n) * w
    np.fill_diagonal(y, 0.0)
    return MatrixOperator(y, delta_i)


@dataclass(frozen=True, eq=False)
class DenseResult:
    u_hat: np.ndarray
    v_hat: np.ndarray
    sigma_v: float
    converged: bool
    iters_used: int
    hard_labels: np.ndarray
    overlap_trace: np.ndarray | None = None
    delta_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seconds: float = 0.0

    def magnetization(self, truth) -> float:
        """``m_u = (1/N) sum_i u_hat_i u_i``."""
        return float(np.mean(self.u_hat * np.asarray(truth, dtype=np.float64)))


def f_u(b: np.ndarray, prior_llr: np.ndarray) -> np.ndarray:
    """Posterior mean of ``u = +-1`` with prior log-odds ``prior_llr`` and field ``b``."""
    return np.tanh(b + 0.5 * prior_llr)


def run_amp_amp(instance: Instance, supervision: Supervision, options: RunOptions = RunOptions(), *,
                operator=None, dense_params: DenseParams | None = None, mu: float | None = None,
                truth=None) -> DenseResult:
    """AMP-AMP. By default the graph channel uses the matched dense parameters of the instance."""
    if not instance.is_binary:
        raise InvalidParameterError("AMP-AMP supports the binary model only")
    if operator is None:
        dp = dense_params or DenseParams.from_sparse(instance.params)
        operator = GraphOperator(instance, dp.degree_fraction, dp.graph_snr)
    if options.criterion == "overlap" and truth is None:
        raise InvalidParameterError("the overlap criterion needs the ground truth")
    mu = instance.mu if mu is None else float(mu)
    n, p = instance.n_nodes, instance.feature_dim
    delta_i = operator.delta_i
    t0 = time.perf_counter()

    gen = _rng.generator(options.seed, _rng.INIT)
    prior = supervision.node_prior_plus
    llr = log_prior_ratio(supervision)
    u = np.clip(2.0 * prior - 1.0 + gen.uniform(-options.init_noise, options.init_noise, n), -1.0, 1.0)
    v = gen.uniform(-options.init_noise, options.init_noise, p)
    u_prev = np.zeros(n)
    sigma_v = 1.0
    test = supervision.test_mask
    q_trace, d_trace = [], []
    q_prev, converged, it = None, False, 0
    for it in range(1, options.max_iters + 1):
        sum_sigma_u = float(np.sum(1.0 - u * u))
        _, _, v, sigma_v, b_v = amp_update(u, v, instance.features_nm, mu, it - 1)
        b_uu = operator(u) - (delta_i / n) * sum_sigma_u * u_prev
        if not np.all(np.isfinite(b_uu)):
            raise NonFiniteError("B_UU", it - 1)
        u_new = f_u(b_uu + b_v, llr)
        if options.damping:
            u_new = (1.0 - options.damping) * u_new + options.damping * u
        delta = float(np.max(np.abs(u_new - u)))
        u_prev, u = u, u_new
        d_trace.append(delta)
        if truth is not None:
            q = overlap(hard_labels(u), truth, test_mask=test)
            q_trace.append(q)
        if options.criterion == "messages":
            converged = delta < options.msg_tol
        else:
            converged = q_prev is not None and abs(q - q_prev) < options.overlap_tol
            q_prev = q
        if converged:
            break
    return DenseResult(
        u_hat=u, v_hat=v, sigma_v=sigma_v, converged=converged, iters_used=it,
        hard_labels=hard_labels(u), overlap_trace=np.array(q_trace) if truth is not None else None,
        delta_trace=np.array(d_trace), seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------- state evolution

_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh(n: int):
    if n not in _GH_CACHE:
        x, w = hermegauss(n)
        _GH_CACHE[n] = (x, w / math.sqrt(2.0 * math.pi))
    return _GH_CACHE[n]


def tanh_expectation(m: float, nodes: int = GH_NODES) -> float:
    """``E[tanh(m u0 + sqrt(m) W) u0] = E[tanh(m + sqrt(m) W)]`` by Gauss-Hermite quadrature."""
    if m < 0:
        raise InvalidParameterError("m must be nonnegative")
    if m == 0.0:
        return 0.0
    x, w = _gh(nodes)
    return float(np.dot(w, np.tanh(m + math.sqrt(m) * x)))


@dataclass(frozen=True)
class SeOptions:
    tol: float = 1e-10
    max_iters: int = 10_000
    informative: bool = False  # start from m_u = 1 instead of m_u = rho
    nodes: int = GH_NODES


@dataclass(frozen=True)
class SeState:
    m: float
    m_u: float
    m_v: float


@dataclass(frozen=True, eq=False)
class SeResult:
    fixed_point: SeState
    trajectory: list
    converged: bool

    @property
    def m_u(self):
        return self.fixed_point.m_u

    @property
    def m(self):
        return self.fixed_point.m


def se_step(m_u: float, mu: float, alpha: float, delta_i: float, rho: float, nodes: int = GH_NODES) -> SeState:
    """One pass of the recursion from ``m_u^{t-1}``: returns ``(m^t, m_u^t, m_v^{t+1})``."""
    m_v = mu * m_u / (1.0 + mu * m_u)
    m = (mu / alpha) * m_v + delta_i * m_u
    m_u_new = rho + (1.0 - rho) * tanh_expectation(m, nodes)
    return SeState(m, m_u_new, mu * m_u_new / (1.0 + mu * m_u_new))


def state_evolution(mu: float, alpha: float, delta_i: float, rho: float,
                    options: SeOptions = SeOptions()) -> SeResult:
    """Iterate the scalar recursion to ``|m_u^{t+1} - m_u^t| < tol``."""
    if mu < 0 or alpha <= 0 or delta_i < 0 or not 0.0 <= rho <= 1.0:
        raise InvalidParameterError("need mu >= 0, alpha > 0, delta_i >= 0 and rho in [0, 1]")
    m_u = 1.0 if options.informative else float(rho)
    traj = [SeState(0.0, m_u, mu * m_u / (1.0 + mu * m_u))]
    converged = False
    for _ in range(options.max_iters):
        st = se_step(m_u, mu, alpha, delta_i, rho, options.nodes)
        traj.append(st)
        done = abs(st.m_u - m_u) < options.tol
        m_u = st.m_u
        if done:
            converged = True
            break
    return SeResult(traj[-1], traj, converged)


def se_predicted_overlap(m_u_fixed: float, rho: float, m_fixed: float) -> float:
    """Test overlap of ``sign(u_hat)`` when the effective field is ``m u0 + sqrt(m) W``: ``2 Phi(sqrt m) - 1``."""
    if m_fixed < 0:
        raise InvalidParameterError("m must be nonnegative")
    return float(2.0 * ndtr(math.sqrt(m_fixed)) - 1.0)
