"""Command-line front end.

    csbm [--seed S] [--threads T] [--deterministic] [--out PATH] [--config FILE] <command> [options]

Commands: generate, infer, sweep, em, se, mcmc, oracle, logistic, bench.

A config file is INI-style: keys in ``[common]`` apply to every command,
keys in a section named after the command apply to that command only, and
flags given on the command line win over both. Keys are the long option
names with dashes or underscores, e.g. ``lam = 1.2``.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CSBMError

COMMANDS = ("generate", "infer", "sweep", "em", "se", "mcmc", "oracle", "logistic", "bench")


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--instance", help="load a saved instance directory instead of sampling")
    g.add_argument("--n", type=int, default=10_000, help="number of nodes N")
    g.add_argument("--alpha", type=float, default=10.0, help="N/P")
    g.add_argument("--p", type=int, default=None, help="feature dimension P (overrides --alpha)")
    g.add_argument("--d", type=float, default=5.0, help="average degree")
    g.add_argument("--lam", type=float, default=1.0, help="graph snr lambda")
    g.add_argument("--mu", type=float, default=2.0, help="feature snr mu")
    g.add_argument("--rho", type=float, default=0.0, help="fraction of revealed labels")
    g.add_argument("--q", type=float, default=1.0, help="probability a revealed label is correct")
    g.add_argument("--r", type=int, default=2, help="number of groups")
    g.add_argument("--dtype", choices=("float64", "float32"), default="float64", help="feature storage")
    g.add_argument("--budget-gib", type=float, default=4.0, help="memory budget of the feature matrix")


def _add_run_args(p):
    g = p.add_argument_group("solver")
    g.add_argument("--max-iters", type=int, default=200)
    g.add_argument("--msg-tol", type=float, default=1e-6)
    g.add_argument("--overlap-tol", type=float, default=1e-3)
    g.add_argument("--criterion", choices=("messages", "overlap"), default="messages")
    g.add_argument("--damping", type=float, default=0.0)
    g.add_argument("--init-noise", type=float, default=1e-2)


def _add_global_args(p, suppress=False):
    # accepted before or after the command name; the subcommand copy must not
    # clobber a value given before it, hence SUPPRESS
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="master seed", **({"default": 0} | kw))
    p.add_argument("--threads", type=int, help="BLAS threads", **({"default": None} | kw))
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS and zeroed timing columns (byte-identical output)", **kw)
    p.add_argument("--out", help="output file or directory (default: stdout)", **({"default": None} | kw))
    p.add_argument("--config", help="INI config file", **({"default": None} | kw))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csbm", description="Bayes-optimal inference for the contextual SBM")
    ap.add_argument("--version", action="version", version=f"csbm {__version__}")
    _add_global_args(ap)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample an instance and write it to --out")
    _add_model_args(p)

    p = sub.add_parser("infer", help="run a solver on one instance")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--algorithm", choices=("amp_bp", "multi", "amp_amp"), default="amp_bp")
    p.add_argument("--phi", action="store_true", help="also report the Bethe free entropy")
    p.add_argument("--marginals", default=None, help="write per-node marginals to this CSV")

    p = sub.add_parser("sweep", help="grid of parameters x repeats -> CSV")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--algorithm", choices=("amp_bp", "multi", "amp_amp", "se", "mcmc", "logistic"),
                   default="amp_bp")
    p.add_argument("--grid", action="append", default=[],
                   help="NAME=VALUES with NAME in lambda,rho,alpha,mu,d,N,q and VALUES 'a,b,c' or 'start:stop:step'")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (grid points run concurrently)")
    p.add_argument("--phi", action="store_true", help="add the Bethe free entropy (amp_bp)")
    p.add_argument("--sweeps", type=int, default=2000, help="MCMC sweeps")
    p.add_argument("--burn-in", type=int, default=500, help="MCMC burn-in sweeps")

    p = sub.add_parser("em", help="estimate (c_in, c_out, mu) by expectation-maximization")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--init", default=None, help="c_in,c_out,mu (default: truth scaled by --init-scale)")
    p.add_argument("--init-scale", default="1.3,0.7,1.5", help="factors applied to the truth")
    p.add_argument("--em-tol", type=float, default=1e-4)
    p.add_argument("--em-damping", type=float, default=0.5)
    p.add_argument("--max-outer", type=int, default=50)

    p = sub.add_parser("se", help="state evolution of the dense limit")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--mu", type=float, default=2.0)
    p.add_argument("--lam", type=float, default=None, help="sets Delta_I = lam^2")
    p.add_argument("--delta-i", type=float, default=None, help="graph inverse noise Delta_I")
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--informative", action="store_true", help="start from m_u = 1")
    p.add_argument("--trajectory", action="store_true", help="print every step")

    p = sub.add_parser("mcmc", help="Metropolis-within-Gibbs posterior marginals")
    _add_model_args(p)
    p.add_argument("--sweeps", type=int, default=100_000)
    p.add_argument("--burn-in", type=int, default=10_000)
    p.add_argument("--marginals", default=None)

    p = sub.add_parser("oracle", help="exact marginals by enumeration (N <= 16)")
    _add_model_args(p)
    p.add_argument("--graph-model", choices=("full", "edges_only"), default="full")

    p = sub.add_parser("logistic", help="logistic-regression baseline on the features")
    _add_model_args(p)
    p.add_argument("--l2-grid", default="1e-4,1e-3,1e-2,1e-1,1")
    p.add_argument("--steps", type=int, default=2000)

    p = sub.add_parser("bench", help="compiled kernels vs pure-Python fallback")
    p.add_argument("--quick", action="store_true")
    for sp in sub.choices.values():
        _add_global_args(sp, suppress=True)
    return ap


def _config_defaults(path, command):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise CSBMError(f"cannot read config file {path}")
    out = {}
    for section in ("common", command):
        if cp.has_section(section):
            for k, v in cp.items(section):
                out[k.replace("-", "_")] = v
    return out


def parse_args(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        cfg = _config_defaults(args.config, args.command)
        sub = next(a for a in ap._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
        sp = sub.choices[args.command]
        known = {a.dest: a for a in sp._actions}
        known_top = {a.dest: a for a in ap._actions}
        sub_defaults, top_defaults = {}, {}
        for k, v in cfg.items():
            act = known_top.get(k) or known.get(k)
            if act is None:
                raise CSBMError(f"unknown config key {k!r} for command {args.command!r}")
            if isinstance(act, argparse._StoreTrueAction):
                val = v.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(act, argparse._AppendAction):
                val = [x.strip() for x in v.splitlines() if x.strip()]
            else:
                val = act.type(v) if act.type else v
            (top_defaults if k in known_top else sub_defaults)[k] = val
        sp.set_defaults(**sub_defaults)
        ap.set_defaults(**top_defaults)
        args = ap.parse_args(argv)
    return args


# ------------------------------------------------------------------ helpers

def _params(args):
    from .model import ModelParams

    p = args.p if args.p is not None else max(1, int(round(args.n / args.alpha)))
    return ModelParams(args.n, p, args.d, args.lam, args.mu, args.rho, args.q, args.r)


def _instance(args):
    from .io import load_instance
    from .model import sample_instance

    if getattr(args, "instance", None):
        return load_instance(args.instance)
    return sample_instance(_params(args), args.seed, dtype=np.dtype(args.dtype),
                           memory_budget=int(args.budget_gib * 1024**3))


def _supervision(args, inst):
    from .model import make_supervision

    return make_supervision(inst, args.rho, args.q, args.seed)


def _run_options(args):
    from .amp_bp import RunOptions

    return RunOptions(max_iters=args.max_iters, msg_tol=args.msg_tol, overlap_tol=args.overlap_tol,
                      damping=args.damping, init_noise=args.init_noise, seed=args.seed,
                      criterion=args.criterion)


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yield fh


def _emit(args, payload: dict):
    with _output(args.out) as fh:
        fh.write(json.dumps(payload, indent=1, default=float) + "\n")


def _ms(args, t0):
    return 0.0 if args.deterministic else round(1000.0 * (time.perf_counter() - t0), 3)


# ------------------------------------------------------------------ commands

def cmd_generate(args):
    from .io import save_instance

    if not args.out:
        raise CSBMError("generate needs --out DIRECTORY")
    inst = _instance(args)
    out = save_instance(inst, args.out)
    print(json.dumps({"out": str(out), "N": inst.n_nodes, "P": inst.feature_dim,
                      "edges": inst.graph.n_edges, "mean_degree": inst.graph.mean_degree()}))


def cmd_infer(args):
    from . import amp_bp, dense, multi
    from .free_energy import bethe_free_entropy

    t_gen = time.perf_counter()
    inst = _instance(args)
    sup = _supervision(args, inst)
    gen_ms = _ms(args, t_gen)
    opts = _run_options(args)
    t0 = time.perf_counter()
    payload = {"algorithm": args.algorithm, "N": inst.n_nodes, "P": inst.feature_dim, "seed": args.seed}
    if args.algorithm == "multi":
        res = multi.run_multi(inst, sup, opts, truth=inst.groups if opts.criterion == "overlap" else None)
        q = multi.overlap_multi(res.hard_labels, inst.groups, test_mask=sup.test_mask,
                                num_groups=inst.num_groups, group_prior=inst.params.group_prior,
                                align=sup.rho == 0)
        marg = res.marginals
    else:
        truth = inst.labels if inst.is_binary else None
        if args.algorithm == "amp_bp":
            res = amp_bp.run(inst, sup, opts, truth=truth if opts.criterion == "overlap" else None)
            marg = res.marginals
            if args.phi:
                payload["phi"] = bethe_free_entropy(res, inst, sup).phi
        else:
            res = dense.run_amp_amp(inst, sup, opts, truth=truth if opts.criterion == "overlap" else None)
            marg = (1.0 + res.u_hat) / 2.0
        q = amp_bp.overlap(res.hard_labels, inst.labels, test_mask=sup.test_mask)
        payload["mse_v"] = amp_bp.mse_v(res.v_hat, inst.centroids)
    payload.update(q_u=q, iterations=res.iters_used, converged=bool(res.converged),
                   ms=_ms(args, t0), generate_ms=gen_ms)
    if args.marginals:
        m = np.atleast_2d(np.asarray(marg).T).T
        np.savetxt(args.marginals, np.column_stack([np.arange(inst.n_nodes), m]), delimiter=",",
                   header="node," + ",".join(f"p{s}" for s in range(m.shape[1])), comments="", fmt="%.12g")
    _emit(args, payload)


def cmd_sweep(args):
    from threadpoolctl import threadpool_limits

    from .model import ModelParams  # noqa: F401  (validates imports early)
    from .sweep import Point, SweepConfig, parse_grid_values, rows_to_csv, run_sweep

    grid = {}
    for spec in args.grid:
        if "=" not in spec:
            raise CSBMError(f"grid spec {spec!r} must look like NAME=VALUES")
        k, v = spec.split("=", 1)
        grid[k.strip()] = parse_grid_values(v)
    base = Point(args.n, args.alpha if args.p is None else args.n / args.p, args.d, args.lam, args.mu,
                 args.rho, args.q, args.r)
    cfg = SweepConfig(base=base, grid=grid, repeats=args.repeats, algorithm=args.algorithm,
                      run=_run_options(args), master_seed=args.seed, compute_phi=args.phi,
                      mcmc_sweeps=args.sweeps, mcmc_burn_in=args.burn_in, feature_dtype=args.dtype)
    rows = run_sweep(cfg, workers=args.jobs)
    for r in rows:
        if "error" in r:
            print(f"warning: N={r['N']} lambda={r['lambda']} seed={r['seed']}: {r['error']}", file=sys.stderr)
    with _output(args.out) as fh:
        fh.write(rows_to_csv(rows, args.seed, args.deterministic))


def cmd_em(args):
    from .amp_bp import RunOptions  # noqa: F401
    from .free_energy import EmOptions, em_fit

    inst = _instance(args)
    sup = _supervision(args, inst)
    truth = (inst.affinity.c_in, inst.affinity.c_out, inst.mu)
    if args.init:
        init = tuple(float(x) for x in args.init.split(","))
    else:
        init = tuple(t * float(s) for t, s in zip(truth, args.init_scale.split(",")))
    if len(init) != 3:
        raise CSBMError("--init needs three values c_in,c_out,mu")
    est = em_fit(inst, sup, init, EmOptions(args.max_outer, args.em_tol, args.em_damping, _run_options(args)))
    with _output(args.out) as fh:
        fh.write(f"# csbm {__version__} master_seed={args.seed} truth={truth[0]:.6f},{truth[1]:.6f},{truth[2]:.6f}\n")
        fh.write("iteration,c_in,c_out,mu,phi\n")
        for it, ci, co, mu, phi in est.trace:
            fh.write(f"{it},{ci:.10g},{co:.10g},{mu:.10g},{phi:.10g}\n")
        fh.write(f"final,{est.c_in:.10g},{est.c_out:.10g},{est.mu:.10g},nan\n")
    if est.aborted:
        print(f"warning: EM aborted: {est.aborted}", file=sys.stderr)


def cmd_se(args):
    from .dense import SeOptions, se_predicted_overlap, state_evolution

    if args.delta_i is None and args.lam is None:
        raise CSBMError("se needs --delta-i or --lam")
    delta_i = args.delta_i if args.delta_i is not None else args.lam**2
    res = state_evolution(args.mu, args.alpha, delta_i, args.rho, SeOptions(informative=args.informative))
    with _output(args.out) as fh:
        fh.write("step,m,m_u,m_v\n")
        steps = enumerate(res.trajectory) if args.trajectory else [(len(res.trajectory) - 1, res.fixed_point)]
        for k, st in steps:
            fh.write(f"{k},{st.m:.12g},{st.m_u:.12g},{st.m_v:.12g}\n")
        fh.write(f"# converged={res.converged} q_u_predicted={se_predicted_overlap(res.m_u, args.rho, res.m):.12g}\n")


def cmd_mcmc(args):
    from .amp_bp import overlap
    from .oracles import McmcOptions, mcmc_marginals

    inst = _instance(args)
    sup = _supervision(args, inst)
    t0 = time.perf_counter()
    res = mcmc_marginals(inst, sup, McmcOptions(args.sweeps, args.burn_in, args.seed))
    q = overlap(res.hard_labels, inst.labels, test_mask=sup.test_mask)
    if args.marginals:
        np.savetxt(args.marginals, np.column_stack([np.arange(inst.n_nodes), res.prob_plus]),
                   delimiter=",", header="node,p_plus", comments="", fmt="%.12g")
    _emit(args, {"q_u": q, "acceptance": res.acceptance, "sweeps": args.sweeps, "ms": _ms(args, t0)})


def cmd_oracle(args):
    from .oracles import exact_marginals

    inst = _instance(args)
    sup = _supervision(args, inst)
    tab = exact_marginals(inst, sup, graph_model=args.graph_model)
    with _output(args.out) as fh:
        fh.write("node,p_plus,truth\n")
        for i, (pp, t) in enumerate(zip(tab.prob_plus, inst.labels)):
            fh.write(f"{i},{pp:.15g},{int(t)}\n")


def cmd_logistic(args):
    from .oracles import logistic_baseline

    inst = _instance(args)
    sup = _supervision(args, inst)
    grid = [float(x) for x in args.l2_grid.split(",")]
    res = logistic_baseline(inst, sup, grid, steps=args.steps, seed=args.seed)
    _emit(args, {"q_u": res.q_u, "l2": res.l2, "validation_accuracy": {str(k): v for k, v in res.validation_accuracy.items()}})


def cmd_bench(args):
    from . import bench
    from ._kernels import BACKEND

    text = f"default backend: {BACKEND}\n" + bench.format_rows(bench.run_all(args.quick)) + "\n"
    with _output(args.out) as fh:
        fh.write(text)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CSBMError as exc:
        print(f"csbm: error: {exc}", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    threads = 1 if args.deterministic else args.threads
    handler = globals()[f"cmd_{args.command}"]
    try:
        if threads is not None:
            with threadpool_limits(limits=threads):
                handler(args)
        else:
            handler(args)
    except (CSBMError, OSError) as exc:
        print(f"csbm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
