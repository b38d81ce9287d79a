"""Bethe free entropy of an AMP-BP fixed point, its parameter gradient and EM updates.

All functions take a :class:`~csbm.amp_bp.FixedPoint` together with the
instance it was computed on. The free entropy is per node,

    N phi = N d/2 + sum_i log Z_i - sum_(ij) log Z_ij + (feature terms),

with ``d = (c_in + c_out)/2`` taken from the affinity the fixed point was
run with. The double sum over ``(i, beta)`` is evaluated in factorized form:
``sqrt(mu/N) v^T B u`` plus products of per-node and per-feature sums.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import amp_bp
from .amp_bp import FixedPoint, RunOptions
from .errors import CSBMError, InvalidParameterError
from .model import Affinity, Instance, Supervision


class NotConvergedWarning(UserWarning):
    """The fixed point handed to a free-entropy routine did not meet its tolerance."""


@dataclass(frozen=True)
class BetheValue:
    phi: float
    converged: bool = True

    def __float__(self):
        return self.phi


def _edge_terms(fp: FixedPoint, instance: Instance, affinity: Affinity):
    """Per undirected edge: ``chi_+^{i->j}``, ``chi_+^{j->i}``, same-group and cross-group weights, ``Z_ij``."""
    g = instance.graph
    chi = fp.state.chi_plus_dir
    # slot e carries src -> dst; keep one slot per undirected edge
    one = np.flatnonzero(g.src < g.dst)
    a = chi[one]
    b = chi[g.rev[one]]
    same = a * b + (1.0 - a) * (1.0 - b)
    cross = a * (1.0 - b) + (1.0 - a) * b
    z = affinity.c_in * same + affinity.c_out * cross
    return same, cross, z


def _bilinear(instance: Instance, v_hat, u_hat) -> float:
    """``v^T B u = sum_{i, beta} B_{beta i} v_beta u_i``."""
    feats = instance.features_nm
    return float(np.dot(u_hat, amp_bp._matvec(feats, v_hat)))


def _check(fp: FixedPoint):
    if not fp.converged:
        warnings.warn("free entropy evaluated at a non-converged state", NotConvergedWarning, stacklevel=3)


def bethe_free_entropy(fp: FixedPoint, instance: Instance, supervision: Supervision,
                       affinity: Affinity | None = None, mu: float | None = None,
                       *, naive: bool = False) -> BetheValue:
    """Bethe free entropy per node. ``naive=True`` evaluates the ``(i, beta)`` double sum directly."""
    _check(fp)
    affinity = affinity or fp.affinity or instance.affinity
    mu = fp.mu if mu is None else float(mu)
    mu = instance.mu if mu is None else mu
    st = fp.state
    g = instance.graph
    n, p = instance.n_nodes, instance.feature_dim
    c_in, c_out = affinity.c_in, affinity.c_out
    d = 0.5 * (c_in + c_out)

    # node terms: log sum_u exp(h~_u^i) prod_k sum_t C_{u,t} chi_t^{k->i}
    chi_in = st.chi_plus_dir
    dc = c_in - c_out
    lp = np.log(np.maximum(c_out + dc * chi_in, 1e-300))
    lm = np.log(np.maximum(c_in - dc * chi_in, 1e-300))
    sp = np.bincount(g.dst, weights=lp, minlength=n)
    sm = np.bincount(g.dst, weights=lm, minlength=n)
    node = logsumexp(np.stack([st.tilde_field[:, 0] + sp, st.tilde_field[:, 1] + sm]), axis=0)

    _, _, z = _edge_terms(fp, instance, affinity)
    edge = float(np.sum(np.log(np.maximum(z, 1e-300))))

    u, v = st.u_hat, st.v_hat
    a_u, sv = st.a_u, st.sigma_v
    feat_v = 0.5 * float(np.sum(st.b_u**2 / (1.0 + a_u) - math.log1p(a_u)))
    if naive:
        b = np.asarray(instance.features, dtype=np.float64)
        vv, uu = v[:, None], u[None, :]
        pair = float(np.sum(math.sqrt(mu / n) * b * vv * uu
                            - (mu / n) * (0.5 * vv**2 + uu**2 * sv - 0.5 * vv**2 * uu**2)))
    else:
        s_v2, s_u2 = float(v @ v), float(u @ u)
        pair = (math.sqrt(mu / n) * _bilinear(instance, v, u)
                - (mu / n) * (0.5 * n * s_v2 + p * sv * s_u2 - 0.5 * s_v2 * s_u2))
    total = n * d / 2.0 + float(node.sum()) - edge + feat_v - pair
    if not math.isfinite(total):
        raise CSBMError("Bethe free entropy is not finite")
    return BetheValue(total / n, fp.converged)


@dataclass(frozen=True)
class Gradient:
    d_c_in: float
    d_c_out: float
    d_mu: float | None  # undefined at mu = 0

    def as_array(self):
        return np.array([self.d_c_in, self.d_c_out, np.nan if self.d_mu is None else self.d_mu])


def free_entropy_gradient(fp: FixedPoint, instance: Instance, affinity: Affinity | None = None,
                          mu: float | None = None, *, balanced: bool = False) -> Gradient:
    """Partial derivatives of ``phi`` in ``(c_in, c_out, mu)`` at fixed messages.

    The constant from the non-edge field is ``1/4 - (f_+^2 + f_-^2)`` for
    ``c_in`` and ``1/4 - 2 f_+ f_-`` for ``c_out``, ``f_+-`` being the mean
    marginals; both equal ``-1/4`` for balanced marginals, the value used
    when ``balanced=True``.
    """
    _check(fp)
    affinity = affinity or fp.affinity or instance.affinity
    mu = fp.mu if mu is None else float(mu)
    mu = instance.mu if mu is None else mu
    n = instance.n_nodes
    same, cross, z = _edge_terms(fp, instance, affinity)
    if balanced:
        k_in = k_out = -0.25
    else:
        fp_ = float(np.mean(fp.state.chi_plus_node))
        fm_ = 1.0 - fp_
        k_in = 0.25 - (fp_ * fp_ + fm_ * fm_)
        k_out = 0.25 - 2.0 * fp_ * fm_
    g_in = k_in + float(np.sum(same / z)) / n
    g_out = k_out + float(np.sum(cross / z)) / n
    if mu <= 0:
        return Gradient(g_in, g_out, None)
    st = fp.state
    alpha = instance.alpha
    x = _bilinear(instance, st.v_hat, st.u_hat)
    g_mu = (x / math.sqrt(mu * n) - float(st.v_hat @ st.v_hat) - st.sigma_v * float(st.u_hat @ st.u_hat) / alpha) / (2 * n)
    return Gradient(g_in, g_out, g_mu)


@dataclass(frozen=True)
class ParamEstimate:
    c_in: float
    c_out: float
    mu: float
    trace: tuple = ()
    converged: bool = False
    mu_informative: bool = True
    aborted: str | None = None

    @property
    def affinity(self) -> Affinity:
        return Affinity.binary(self.c_in, self.c_out)


def em_step(fp: FixedPoint, instance: Instance, affinity: Affinity | None = None,
            mu: float | None = None, *, tiny: float = 1e-12) -> ParamEstimate:
    """Closed-form update that sets the free-entropy gradient to zero (one substitution)."""
    affinity = affinity or fp.affinity or instance.affinity
    mu = fp.mu if mu is None else float(mu)
    mu = instance.mu if mu is None else mu
    n = instance.n_nodes
    same, cross, z = _edge_terms(fp, instance, affinity)
    c_in = 4.0 / n * float(np.sum(affinity.c_in * same / z))
    c_out = 4.0 / n * float(np.sum(affinity.c_out * cross / z))
    st = fp.state
    alpha = instance.alpha
    num = alpha / math.sqrt(n) * _bilinear(instance, st.v_hat, st.u_hat)
    den = alpha * float(st.v_hat @ st.v_hat) + st.sigma_v * float(st.u_hat @ st.u_hat)
    if den <= tiny:
        return ParamEstimate(c_in, c_out, mu, mu_informative=False)
    return ParamEstimate(c_in, c_out, (num / den) ** 2)


@dataclass(frozen=True)
class EmOptions:
    max_outer: int = 50
    tol: float = 1e-4
    damping: float = 0.5
    run: RunOptions = field(default_factory=RunOptions)

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise InvalidParameterError("EM damping must lie in [0, 1)")


def em_fit(instance: Instance, supervision: Supervision, init: tuple | ParamEstimate,
           options: EmOptions = EmOptions()) -> ParamEstimate:
    """Alternate AMP-BP at the current estimate with :func:`em_step` until the relative change
    of every parameter is below ``tol``. AMP-BP is warm-started from the previous fixed point."""
    if isinstance(init, ParamEstimate):
        c_in, c_out, mu = init.c_in, init.c_out, init.mu
    else:
        c_in, c_out, mu = (float(x) for x in init)
    if min(c_in, c_out, mu) < 0:
        raise InvalidParameterError("initial parameters must be nonnegative")
    trace = []
    state = None
    converged = False
    mu_inf = True
    for outer in range(1, options.max_outer + 1):
        aff = Affinity.binary(c_in, c_out)
        try:
            fp = amp_bp.run(instance, supervision, options.run, affinity=aff, mu=mu, init=state)
        except CSBMError as exc:
            return ParamEstimate(c_in, c_out, mu, tuple(trace), False, mu_inf, aborted=str(exc))
        state = fp.state
        phi = bethe_free_entropy(fp, instance, supervision, aff, mu).phi if fp.converged else math.nan
        trace.append((outer, c_in, c_out, mu, phi))
        up = em_step(fp, instance, aff, mu)
        mu_inf = up.mu_informative
        k = options.damping
        new = ((1 - k) * up.c_in + k * c_in, (1 - k) * up.c_out + k * c_out, (1 - k) * up.mu + k * mu)
        change = max(abs(a - b) / max(abs(b), 1e-12) for a, b in zip(new, (c_in, c_out, mu)))
        c_in, c_out, mu = new
        if change < options.tol:
            converged = True
            break
    return ParamEstimate(c_in, c_out, mu, tuple(trace), converged, mu_inf)


def rerun_phi(instance: Instance, supervision: Supervision, affinity: Affinity, mu: float,
              options: RunOptions, init=None) -> tuple[float, FixedPoint]:
    """Free entropy after re-solving AMP-BP at ``(affinity, mu)``, warm-started from ``init``."""
    fp = amp_bp.run(instance, supervision, options, affinity=affinity, mu=mu, init=init)
    return bethe_free_entropy(fp, instance, supervision, affinity, mu).phi, fp


def finite_difference_gradient(instance: Instance, supervision: Supervision, affinity: Affinity, mu: float,
                               options: RunOptions, step: float = 1e-3, init=None) -> np.ndarray:
    """Central differences of ``phi`` in ``(c_in, c_out, mu)``, re-solving at every evaluation."""
    base = (affinity.c_in, affinity.c_out, mu)
    out = []
    for k in range(3):
        vals = []
        for sgn in (1.0, -1.0):
            th = list(base)
            th[k] += sgn * step
            phi, _ = rerun_phi(instance, supervision, Affinity.binary(th[0], th[1]), th[2], options, init)
            vals.append(phi)
        out.append((vals[0] - vals[1]) / (2 * step))
    return np.array(out)
