"""Parameter sweeps producing one CSV row per (grid point, repeat)."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from . import rng as _rng
from .amp_bp import RunOptions
from .errors import InvalidParameterError

ALGORITHMS = ("amp_bp", "multi", "amp_amp", "se", "mcmc", "logistic")
GRID_KEYS = {"lambda": "snr_lambda", "rho": "train_fraction", "alpha": "alpha", "mu": "snr_mu",
             "d": "avg_degree", "N": "n_nodes", "q": "label_flip_keep_prob"}
COLUMNS = ["N", "P", "alpha", "d", "lambda", "mu", "rho", "algorithm", "seed", "q_u",
           "iterations", "converged", "phi", "ms"]


@dataclass(frozen=True)
class Point:
    n_nodes: int
    alpha: float
    avg_degree: float
    snr_lambda: float
    snr_mu: float
    train_fraction: float = 0.0
    label_flip_keep_prob: float = 1.0
    num_groups: int = 2

    @property
    def feature_dim(self) -> int:
        return max(1, int(round(self.n_nodes / self.alpha)))

    def model_params(self):
        from .model import ModelParams

        return ModelParams(self.n_nodes, self.feature_dim, self.avg_degree, self.snr_lambda, self.snr_mu,
                           self.train_fraction, self.label_flip_keep_prob, self.num_groups)

    def key(self) -> tuple:
        """Stable identity of the point, independent of its position in the grid."""
        h = hashlib.sha256(repr(tuple(round(float(x), 12) for x in asdict(self).values())).encode())
        return tuple(int.from_bytes(h.digest()[k:k + 4], "little") for k in (0, 4))


@dataclass(frozen=True)
class SweepConfig:
    base: Point
    grid: dict = field(default_factory=dict)  # column name -> list of values
    repeats: int = 1
    algorithm: str = "amp_bp"
    run: RunOptions = field(default_factory=RunOptions)
    master_seed: int = 0
    compute_phi: bool = False
    mcmc_sweeps: int = 2000
    mcmc_burn_in: int = 500
    feature_dtype: str = "float64"

    def __post_init__(self):
        if self.repeats < 1:
            raise InvalidParameterError("repeats must be at least 1")
        if self.algorithm not in ALGORITHMS:
            raise InvalidParameterError(f"algorithm must be one of {ALGORITHMS}")
        for k, vals in self.grid.items():
            if k not in GRID_KEYS:
                raise InvalidParameterError(f"cannot sweep over {k!r}; choose from {sorted(GRID_KEYS)}")
            if len(vals) == 0:
                raise InvalidParameterError(f"grid for {k!r} is empty")

    def points(self) -> list[Point]:
        if not self.grid:
            return [self.base]
        keys = list(self.grid)
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            kw = {GRID_KEYS[k]: (int(v) if k == "N" else float(v)) for k, v in zip(keys, combo)}
            out.append(replace(self.base, **kw))
        return out

    def jobs(self):
        for pt in self.points():
            for rep in range(self.repeats):
                yield pt, rep, _rng.derive_seed(self.master_seed, *pt.key(), rep)


def parse_grid_values(spec: str) -> list[float]:
    """``"0.5,0.7,0.9"`` or ``"start:stop:step"`` (stop included up to rounding)."""
    spec = spec.strip()
    if ":" in spec:
        a, b, s = (float(x) for x in spec.split(":"))
        if s <= 0:
            raise InvalidParameterError("grid step must be positive")
        k = int(math.floor((b - a) / s + 1e-9))
        return [round(a + i * s, 12) for i in range(k + 1)]
    return [float(x) for x in spec.split(",") if x.strip()]


def run_point(cfg: SweepConfig, pt: Point, seed: int) -> dict:
    """One row; exceptions become a row with ``converged = False``."""
    from . import amp_bp, dense, multi, oracles
    from .free_energy import bethe_free_entropy
    from .model import make_supervision, sample_instance

    row = {"N": pt.n_nodes, "P": pt.feature_dim, "alpha": pt.alpha, "d": pt.avg_degree,
           "lambda": pt.snr_lambda, "mu": pt.snr_mu, "rho": pt.train_fraction,
           "algorithm": cfg.algorithm, "seed": seed, "q_u": math.nan, "iterations": 0,
           "converged": False, "phi": math.nan, "ms": 0.0}
    t0 = time.perf_counter()
    opts = replace(cfg.run, seed=seed)
    try:
        if cfg.algorithm == "se":
            dp = dense.DenseParams.from_sparse(pt.model_params())
            se = dense.state_evolution(pt.snr_mu, pt.alpha, dp.delta_i, pt.train_fraction)
            row.update(q_u=dense.se_predicted_overlap(se.m_u, pt.train_fraction, se.m),
                       iterations=len(se.trajectory) - 1, converged=se.converged)
        else:
            inst = sample_instance(pt.model_params(), seed, dtype=np.dtype(cfg.feature_dtype))
            sup = make_supervision(inst, pt.train_fraction, pt.label_flip_keep_prob, seed)
            test = sup.test_mask
            if cfg.algorithm == "amp_bp":
                fp = amp_bp.run(inst, sup, opts, truth=inst.labels if opts.criterion == "overlap" else None)
                row.update(q_u=amp_bp.overlap(fp.hard_labels, inst.labels, test_mask=test),
                           iterations=fp.iters_used, converged=fp.converged)
                if cfg.compute_phi:
                    row["phi"] = bethe_free_entropy(fp, inst, sup).phi
            elif cfg.algorithm == "multi":
                res = multi.run_multi(inst, sup, opts, truth=inst.groups if opts.criterion == "overlap" else None)
                row.update(q_u=multi.overlap_multi(res.hard_labels, inst.groups, test_mask=test,
                                                   num_groups=inst.num_groups,
                                                   group_prior=inst.params.group_prior,
                                                   align=pt.train_fraction == 0),
                           iterations=res.iters_used, converged=res.converged)
            elif cfg.algorithm == "amp_amp":
                res = dense.run_amp_amp(inst, sup, opts, truth=inst.labels if opts.criterion == "overlap" else None)
                row.update(q_u=amp_bp.overlap(res.hard_labels, inst.labels, test_mask=test),
                           iterations=res.iters_used, converged=res.converged)
            elif cfg.algorithm == "mcmc":
                mc = oracles.mcmc_marginals(inst, sup, oracles.McmcOptions(cfg.mcmc_sweeps, cfg.mcmc_burn_in, seed))
                row.update(q_u=amp_bp.overlap(mc.hard_labels, inst.labels, test_mask=test),
                           iterations=cfg.mcmc_sweeps, converged=True)
            elif cfg.algorithm == "logistic":
                lr = oracles.logistic_baseline(inst, sup, seed=seed)
                row.update(q_u=lr.q_u, iterations=2000, converged=True)
    except Exception as exc:  # a failed point must not abort the sweep
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["ms"] = 1000.0 * (time.perf_counter() - t0)
    return row


def _run_job(args):
    cfg, pt, seed = args
    return run_point(cfg, pt, seed)


def run_sweep(cfg: SweepConfig, workers: int = 1, progress=None) -> list[dict]:
    """All rows in (point, repeat) order; ``workers > 1`` dispatches jobs to processes."""
    jobs = [(cfg, pt, seed) for pt, _, seed in cfg.jobs()]
    if workers <= 1:
        rows = []
        for j in jobs:
            rows.append(_run_job(j))
            if progress:
                progress(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_job, jobs))


def _fmt(x):
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(round(x, 10))
    return str(x)


def rows_to_csv(rows: list[dict], master_seed: int, deterministic: bool = False) -> str:
    buf = io.StringIO()
    buf.write(f"# csbm {__version__} master_seed={master_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        vals = dict(r)
        if deterministic:
            vals["ms"] = 0.0
        w.writerow([_fmt(vals[c]) for c in COLUMNS])
    return buf.getvalue()
