"""CSBM parameters, instance generation and semi-supervised priors.

Conventions
-----------
* Group ``0`` is the ``+1`` community and group ``1`` the ``-1`` community in
  the binary model; ``Instance.labels`` returns the ``+-1`` encoding.
* Features are stored node-major: ``features_nm[i]`` is the length-``P``
  feature vector of node ``i``. ``Instance.features`` is the ``P x N`` view
  ``B`` (column-major), matching ``B[beta, i]``.
* Supervision priors are stored as an ``(N, r)`` matrix of probabilities;
  ``node_prior_plus`` is its first column in the binary case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .errors import InvalidParameterError, ResourceBudgetError
from .graph import Graph

# Upper bound on the bytes of one feature matrix. N=3e4, alpha=1 fits in float32.
DEFAULT_FEATURE_BUDGET = 4 * 1024**3

BINARY_CENTROID_COV = np.array([[1.0, -1.0], [-1.0, 1.0]])
BINARY_CENTROID_COV.setflags(write=False)


@dataclass(frozen=True)
class Affinity:
    """Symmetric nonnegative affinity matrix ``C``; edge probability is ``C[s, t] / N``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            raise InvalidParameterError("affinity must be a square matrix with r >= 2")
        if not np.allclose(m, m.T, rtol=0, atol=1e-12):
            raise InvalidParameterError("affinity matrix must be symmetric")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise InvalidParameterError("affinity entries must be finite and nonnegative")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def binary(cls, c_in: float, c_out: float) -> "Affinity":
        return cls(np.array([[c_in, c_out], [c_out, c_in]], dtype=np.float64))

    @property
    def num_groups(self) -> int:
        return self.matrix.shape[0]

    @property
    def c_in(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def c_out(self) -> float:
        return float(self.matrix[0, 1])

    def avg_degree(self, group_prior=None) -> float:
        r = self.num_groups
        p = np.full(r, 1.0 / r) if group_prior is None else np.asarray(group_prior, float)
        return float(p @ self.matrix @ p)

    def __eq__(self, other):
        return isinstance(other, Affinity) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def affinity_from_snr(d: float, lam: float, num_groups: int = 2) -> Affinity:
    """Affinity with mean degree ``d`` and graph signal-to-noise ratio ``lam``.

    For two groups ``c_in = d + lam*sqrt(d)`` and ``c_out = d - lam*sqrt(d)``.
    For ``r`` groups the same contrast is spread as
    ``c_in = d + (r-1)*lam*sqrt(d)``, ``c_out = d - lam*sqrt(d)``, which keeps
    the mean degree at ``d`` and puts ``lam = 1`` on the Kesten-Stigum bound.
    """
    d, lam, r = float(d), float(lam), int(num_groups)
    if r < 2:
        raise InvalidParameterError("num_groups must be >= 2")
    if d < 0:
        raise InvalidParameterError("average degree must be nonnegative")
    sq = math.sqrt(d)
    if d == 0.0:
        if lam != 0.0:
            raise InvalidParameterError("lambda must be 0 when d = 0")
    elif not (-sq / (r - 1) < lam < sq):
        raise InvalidParameterError(
            f"|lambda| must stay below sqrt(d) (got lambda={lam}, d={d}); "
            "larger values give negative edge probabilities"
        )
    c_in = d + (r - 1) * lam * sq
    c_out = d - lam * sq
    m = np.full((r, r), c_out)
    np.fill_diagonal(m, c_in)
    return Affinity(m)


def _check_unit(name, x):
    if not (0.0 <= x <= 1.0):
        raise InvalidParameterError(f"{name} must lie in [0, 1], got {x}")


@dataclass(frozen=True)
class ModelParams:
    """Hyperparameters of the (binary, balanced) CSBM."""

    n_nodes: int
    feature_dim: int
    avg_degree: float
    snr_lambda: float
    snr_mu: float
    train_fraction: float = 0.0
    label_flip_keep_prob: float = 1.0
    num_groups: int = 2

    def __post_init__(self):
        if self.n_nodes < 1 or self.feature_dim < 1:
            raise InvalidParameterError("n_nodes and feature_dim must be positive")
        if self.snr_mu < 0:
            raise InvalidParameterError("snr_mu must be nonnegative")
        _check_unit("train_fraction", self.train_fraction)
        _check_unit("label_flip_keep_prob", self.label_flip_keep_prob)
        affinity_from_snr(self.avg_degree, self.snr_lambda, self.num_groups)

    @classmethod
    def from_alpha(cls, n_nodes: int, alpha: float, **kw) -> "ModelParams":
        return cls(n_nodes=int(n_nodes), feature_dim=max(1, int(round(n_nodes / alpha))), **kw)

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def affinity(self) -> Affinity:
        return affinity_from_snr(self.avg_degree, self.snr_lambda, self.num_groups)

    @property
    def group_prior(self) -> np.ndarray:
        return np.full(self.num_groups, 1.0 / self.num_groups)

    @property
    def centroid_cov(self) -> np.ndarray | None:
        """Covariance of the centroid rows in the one-hot encoding: ``+v`` and ``-v`` for two groups."""
        return BINARY_CENTROID_COV if self.num_groups == 2 else None


@dataclass(frozen=True)
class MultiParams:
    """Hyperparameters of the multi-community CSBM.

    ``centroid_cov`` is the covariance of each centroid row ``v_beta`` (default
    identity). The binary model is the ``r = 2`` case with covariance
    ``[[1, -1], [-1, 1]]``, i.e. centroids ``+v`` and ``-v``.
    """

    n_nodes: int
    feature_dim: int
    affinity: Affinity
    group_prior: tuple
    snr_mu: float
    train_fraction: float = 0.0
    label_flip_keep_prob: float = 1.0
    centroid_cov: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n_nodes < 1 or self.feature_dim < 1:
            raise InvalidParameterError("n_nodes and feature_dim must be positive")
        p = np.asarray(self.group_prior, dtype=np.float64)
        if p.shape != (self.affinity.num_groups,):
            raise InvalidParameterError("group_prior length must match the affinity size")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidParameterError("group_prior must be a probability vector")
        object.__setattr__(self, "group_prior", tuple(float(x) for x in p))
        if self.snr_mu < 0:
            raise InvalidParameterError("snr_mu must be nonnegative")
        _check_unit("train_fraction", self.train_fraction)
        _check_unit("label_flip_keep_prob", self.label_flip_keep_prob)
        if self.centroid_cov is not None:
            cov = np.array(self.centroid_cov, dtype=np.float64)
            r = self.num_groups
            if cov.shape != (r, r) or not np.allclose(cov, cov.T):
                raise InvalidParameterError("centroid_cov must be a symmetric r x r matrix")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise InvalidParameterError("centroid_cov must be positive semidefinite")
            cov.setflags(write=False)
            object.__setattr__(self, "centroid_cov", cov)

    @property
    def num_groups(self) -> int:
        return self.affinity.num_groups

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def avg_degree(self) -> float:
        return self.affinity.avg_degree(self.group_prior)


def as_multi_params(params: ModelParams) -> MultiParams:
    """The binary model written as an ``r = 2`` multi-community model."""
    cov = BINARY_CENTROID_COV if params.num_groups == 2 else None
    return MultiParams(
        n_nodes=params.n_nodes,
        feature_dim=params.feature_dim,
        affinity=params.affinity,
        group_prior=tuple(params.group_prior),
        snr_mu=params.snr_mu,
        train_fraction=params.train_fraction,
        label_flip_keep_prob=params.label_flip_keep_prob,
        centroid_cov=cov,
    )


@dataclass(frozen=True, eq=False)
class Instance:
    """One sampled dataset: graph, features, ground truth."""

    graph: Graph
    features_nm: np.ndarray  # (N, P), row i = features of node i
    groups: np.ndarray  # (N,) int64 in [0, r)
    centroids: np.ndarray  # (P,) binary, (P, r) multi
    params: ModelParams | MultiParams
    seed: int

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def feature_dim(self) -> int:
        return self.features_nm.shape[1]

    @property
    def alpha(self) -> float:
        return self.n_nodes / self.feature_dim

    @property
    def num_groups(self) -> int:
        return self.params.num_groups

    @property
    def is_binary(self) -> bool:
        return self.num_groups == 2 and self.centroids.ndim == 1

    @property
    def mu(self) -> float:
        return float(self.params.snr_mu)

    @property
    def affinity(self) -> Affinity:
        return self.params.affinity

    @property
    def features(self) -> np.ndarray:
        """Feature matrix ``B`` of shape ``(P, N)``."""
        return self.features_nm.T

    @property
    def labels(self) -> np.ndarray:
        """``+-1`` labels (binary model only)."""
        if self.num_groups != 2:
            raise InvalidParameterError("labels in {-1, +1} exist only for two groups")
        return (1 - 2 * self.groups).astype(np.int8)

    @property
    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_groups)[self.groups]

    def with_params(self, params) -> "Instance":
        return Instance(self.graph, self.features_nm, self.groups, self.centroids, params, self.seed)


def _decode_triangular(idx: np.ndarray, n: int):
    """Map ``k in [0, n(n-1)/2)`` to pairs ``a < b`` in row-major upper-triangular order."""
    idx = idx.astype(np.int64)
    # rows: a-th row starts at a*n - a(a+1)/2 and holds n-1-a entries
    a = np.floor(((2 * n - 1) - np.sqrt((2.0 * n - 1) ** 2 - 8.0 * idx)) / 2).astype(np.int64)
    a = np.clip(a, 0, n - 2)
    start = a * n - a * (a + 1) // 2
    over = idx < start
    while np.any(over):
        a[over] -= 1
        start = a * n - a * (a + 1) // 2
        over = idx < start
    nxt = (a + 1) * n - (a + 1) * (a + 2) // 2
    under = idx >= nxt
    while np.any(under):
        a[under] += 1
        start = a * n - a * (a + 1) // 2
        nxt = (a + 1) * n - (a + 1) * (a + 2) // 2
        under = idx >= nxt
    b = idx - start + a + 1
    return a, b


def sample_edges(groups: np.ndarray, affinity: Affinity, rng: np.random.Generator) -> np.ndarray:
    """Each pair ``{i, j}`` is an edge independently with probability ``C[g_i, g_j] / N``.

    Per block, draw the binomial edge count then a uniform subset of pairs of
    that size, which is the same law in ``O(|E|)`` time.
    """
    n = groups.shape[0]
    r = affinity.num_groups
    members = [np.flatnonzero(groups == s) for s in range(r)]
    out = []
    for s in range(r):
        for t in range(s, r):
            p = affinity.matrix[s, t] / n if n else 0.0
            if p > 1.0:
                raise InvalidParameterError(f"edge probability C[{s},{t}]/N = {p:.3g} exceeds 1")
            ms, mt = members[s], members[t]
            k = len(ms) * (len(ms) - 1) // 2 if s == t else len(ms) * len(mt)
            if k == 0 or p == 0.0:
                continue
            m = int(rng.binomial(k, p))
            if m == 0:
                continue
            idx = rng.choice(k, size=m, replace=False)
            if s == t:
                a, b = _decode_triangular(idx, len(ms))
                out.append(np.stack([ms[a], ms[b]], axis=1))
            else:
                out.append(np.stack([ms[idx // len(mt)], mt[idx % len(mt)]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def _check_budget(n: int, p: int, dtype, budget: int):
    nbytes = n * p * np.dtype(dtype).itemsize
    if nbytes > budget:
        raise ResourceBudgetError(
            f"feature matrix N*P = {n}*{p} needs {nbytes / 2**30:.2f} GiB "
            f"({np.dtype(dtype).name}), over the budget of {budget / 2**30:.2f} GiB"
        )


def _sample_features(n, p, signal_rows, mu, dtype, gen):
    """``B[i] = sqrt(mu/N) * signal_rows(i) + Z[i]`` filled in row blocks."""
    feats = gen.standard_normal((n, p), dtype=dtype)
    if mu > 0:
        scale = math.sqrt(mu / n)
        for i0 in range(0, n, 2048):
            i1 = min(n, i0 + 2048)
            feats[i0:i1] += (scale * signal_rows(i0, i1)).astype(dtype, copy=False)
    return feats


def sample_instance(
    params: ModelParams | MultiParams,
    seed: int,
    *,
    dtype=np.float64,
    memory_budget: int = DEFAULT_FEATURE_BUDGET,
) -> Instance:
    """Draw one CSBM instance; identical ``(params, seed)`` give identical instances."""
    if isinstance(params, MultiParams) or params.num_groups != 2:
        return sample_multi_instance(params, seed, dtype=dtype, memory_budget=memory_budget)
    n, p = params.n_nodes, params.feature_dim
    _check_budget(n, p, dtype, memory_budget)

    groups = _rng.generator(seed, _rng.INSTANCE, _rng.LABELS).integers(0, 2, size=n)
    edges = sample_edges(groups, params.affinity, _rng.generator(seed, _rng.INSTANCE, _rng.GRAPH))
    v = _rng.generator(seed, _rng.INSTANCE, _rng.CENTROIDS).standard_normal(p)
    u = 1.0 - 2.0 * groups
    feats = _sample_features(
        n, p, lambda a, b: u[a:b, None] * v[None, :], params.snr_mu, dtype,
        _rng.generator(seed, _rng.INSTANCE, _rng.NOISE),
    )
    return Instance(Graph.from_edges(n, edges), feats, groups.astype(np.int64), v, params, int(seed))


def sample_multi_instance(
    params: ModelParams | MultiParams,
    seed: int,
    *,
    dtype=np.float64,
    memory_budget: int = DEFAULT_FEATURE_BUDGET,
) -> Instance:
    """Multi-community instance: one-hot labels from ``group_prior``, ``r``-dim centroids."""
    if isinstance(params, ModelParams):
        params = MultiParams(
            n_nodes=params.n_nodes, feature_dim=params.feature_dim, affinity=params.affinity,
            group_prior=tuple(params.group_prior), snr_mu=params.snr_mu,
            train_fraction=params.train_fraction, label_flip_keep_prob=params.label_flip_keep_prob,
        )
    n, p, r = params.n_nodes, params.feature_dim, params.num_groups
    _check_budget(n, p, dtype, memory_budget)

    prior = np.asarray(params.group_prior)
    groups = _rng.generator(seed, _rng.INSTANCE, _rng.LABELS).choice(r, size=n, p=prior)
    edges = sample_edges(groups, params.affinity, _rng.generator(seed, _rng.INSTANCE, _rng.GRAPH))
    z = _rng.generator(seed, _rng.INSTANCE, _rng.CENTROIDS).standard_normal((p, r))
    if params.centroid_cov is None:
        v = z
    else:
        w, q = np.linalg.eigh(params.centroid_cov)
        v = z @ (q * np.sqrt(np.clip(w, 0, None))).T
    vt = v.T  # (r, P)
    feats = _sample_features(
        n, p, lambda a, b: vt[groups[a:b]], params.snr_mu, dtype,
        _rng.generator(seed, _rng.INSTANCE, _rng.NOISE),
    )
    return Instance(Graph.from_edges(n, edges), feats, groups.astype(np.int64), v, params, int(seed))


@dataclass(frozen=True, eq=False)
class Supervision:
    """Revealed nodes and per-node label priors ``P_{U,i}``.

    ``observed[i]`` is the (possibly flipped) revealed group of node ``i`` or
    ``-1`` when the node is hidden.
    """

    revealed: np.ndarray
    node_prior: np.ndarray  # (N, r)
    observed: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.node_prior.shape[0]

    @property
    def num_groups(self) -> int:
        return self.node_prior.shape[1]

    @property
    def node_prior_plus(self) -> np.ndarray:
        """``P_{U,i}(+1)`` in the binary model."""
        return self.node_prior[:, 0]

    @property
    def pinned(self) -> np.ndarray:
        """Mask of nodes whose prior is a point mass."""
        return np.isclose(self.node_prior.max(axis=1), 1.0, rtol=0, atol=0)

    @property
    def test_mask(self) -> np.ndarray:
        m = np.ones(self.n_nodes, dtype=bool)
        m[self.revealed] = False
        return m

    @property
    def rho(self) -> float:
        return len(self.revealed) / self.n_nodes

    def permuted(self, perm) -> "Supervision":
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Supervision(np.sort(perm[self.revealed]), self.node_prior[inv], self.observed[inv])


def unsupervised(n_nodes: int, group_prior) -> Supervision:
    prior = np.tile(np.asarray(group_prior, dtype=np.float64), (n_nodes, 1))
    return Supervision(np.zeros(0, dtype=np.int64), prior, np.full(n_nodes, -1, dtype=np.int64))


def make_supervision(instance: Instance, rho: float, keep_prob: float = 1.0, seed: int = 0,
                     group_prior=None) -> Supervision:
    """Reveal ``round(rho*N)`` uniformly chosen nodes, each label kept with probability ``keep_prob``.

    A revealed node gets the prior ``q`` on its observed group and
    ``(1-q)/(r-1)`` on every other group; hidden nodes get ``group_prior``
    (uniform by default for the binary model, the model prior otherwise).
    """
    _check_unit("rho", rho)
    _check_unit("keep_prob", keep_prob)
    n, r = instance.n_nodes, instance.num_groups
    if group_prior is None:
        group_prior = instance.params.group_prior
    sup = unsupervised(n, group_prior)
    k = int(round(rho * n))
    if k == 0:
        return sup
    gen = _rng.generator(seed, _rng.SUPERVISION)
    revealed = np.sort(gen.choice(n, size=k, replace=False))
    truth = instance.groups[revealed]
    observed_groups = truth.copy()
    if keep_prob < 1.0:
        flip = gen.random(k) >= keep_prob
        # wrong label: uniform over the other r-1 groups
        shift = gen.integers(1, r, size=k)
        observed_groups[flip] = (truth[flip] + shift[flip]) % r
    prior = sup.node_prior.copy()
    row = np.full(r, (1.0 - keep_prob) / (r - 1))
    prior[revealed] = row
    prior[revealed, observed_groups] = keep_prob
    observed = sup.observed.copy()
    observed[revealed] = observed_groups
    return Supervision(revealed, prior, observed)


def detectability_threshold(mu: float, alpha: float) -> float | None:
    """Critical graph snr ``lambda_c = sqrt(1 - mu^2/alpha)`` of the unsupervised problem.

    Returns ``None`` when ``mu^2/alpha > 1``: the features alone are above
    threshold and every ``lambda`` is detectable.
    """
    if alpha <= 0:
        raise InvalidParameterError("alpha must be positive")
    x = 1.0 - mu * mu / alpha
    if x < 0:
        return None
    return math.sqrt(x)


def params_from_phi_eps(phi: float, eps: float, alpha: float, d: float | None = None):
    """``(lambda, mu)`` from the angle/excess parameterization.

    ``lambda^2 + mu^2/alpha = 1 + eps`` and ``phi = (2/pi) arctan(lambda sqrt(alpha) / mu)``.
    """
    if not -1.0 <= phi <= 1.0:
        raise InvalidParameterError("phi must lie in [-1, 1]")
    if eps <= -1.0 or alpha <= 0:
        raise InvalidParameterError("need eps > -1 and alpha > 0")
    rad = math.sqrt(1.0 + eps)
    lam = rad * math.sin(math.pi * phi / 2)
    mu = math.sqrt(alpha) * rad * math.cos(math.pi * phi / 2)
    mu = max(mu, 0.0)
    if d is not None and abs(lam) >= math.sqrt(d):
        raise InvalidParameterError(f"lambda={lam:.4g} is not below sqrt(d)={math.sqrt(d):.4g}")
    return lam, mu


def phi_eps_from_params(lam: float, mu: float, alpha: float):
    """Inverse of :func:`params_from_phi_eps`."""
    eps = lam * lam + mu * mu / alpha - 1.0
    phi = (2.0 / math.pi) * math.atan2(lam * math.sqrt(alpha), mu)
    return phi, eps
