"""Command-line interface: ``specmatch {gen,complete,denoise,bench,spectrum,tune}``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .baselines import denoise_all
from .criterion import working_sigma
from .experiments import (
    BenchSettings,
    DENOISE_CASE,
    METHODS,
    SimulationSpec,
    TABLE1_SIGNAL_SCALE,
    denoise_table,
    preset,
    run_benchmark,
    simulate,
    tune_lambda,
)
from .linalg import ObservationMask, project_mask, svd
from .reference import cached_reference


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--ell", type=int, default=32, help="Monte Carlo replicates for the reference")
    p.add_argument("--reference", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--weights", choices=("default", "uniform"), default="default")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--clip", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--cache", default=None, help="reference-spectrum cache directory")
    return p


def _solver_args(p):
    p.add_argument("--method", choices=METHODS, default="estimator1")
    p.add_argument("--rank", type=int, help="used rank s (factorized methods)")
    p.add_argument("--lam", type=float, help="nuclear penalty; tuned on a validation split if absent")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--eta0", type=float, help="dimensionless step (solver default if absent)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--line-search", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    g = sub.add_parser("gen", parents=[common], help="simulate Y, mask and truth")
    g.add_argument("--case", type=int, choices=(1, 2, 3), default=1)
    g.add_argument("--m", type=int, default=500)
    g.add_argument("--n", type=int, default=250)
    g.add_argument("--p", type=float, default=0.2)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--signal-scale", type=float, default=1.0)

    c = sub.add_parser("complete", parents=[common], help="complete a partially observed matrix")
    c.add_argument("--triplets", help="triplet CSV of observations")
    c.add_argument("--rows", type=int)
    c.add_argument("--cols", type=int)
    c.add_argument("--matrix", help="matrix CSV of observations (off-mask entries ignored)")
    c.add_argument("--mask", help="matrix CSV of 0/1 observation indicators")
    c.add_argument("--truth", help="optional matrix CSV of the truth, adds errors to the trace")
    c.add_argument("--test", help="optional triplet CSV scored by RMSE")
    _solver_args(c)

    d = sub.add_parser("denoise", parents=[common], help="fully observed denoising estimators")
    d.add_argument("--matrix", required=True)
    d.add_argument("--rank", type=int, required=True)
    d.add_argument("--lam", type=float, help="nuclear penalty; default twice the noise edge")

    b = sub.add_parser("bench", parents=[common], help="regenerate simulation tables")
    b.add_argument("--table", choices=("table1", "table2", "table3", "crossover"), default="table2")
    b.add_argument("--replicates", type=int, default=100)
    b.add_argument("--methods", nargs="+", choices=METHODS)
    b.add_argument("--sizes", nargs="+", type=int, help="override the m grid (table2)")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--store", help="directory for resumable replicate results")

    s = sub.add_parser("spectrum", parents=[common], help="residual and reference singular values")
    s.add_argument("--matrix", required=True)
    s.add_argument("--mask")
    s.add_argument("--estimate", help="matrix CSV of the fitted matrix; zero if absent")

    t = sub.add_parser("tune", parents=[common], help="train/validation/test protocol on triplets")
    t.add_argument("--triplets", required=True)
    t.add_argument("--rows", type=int)
    t.add_argument("--cols", type=int)
    t.add_argument("--method", choices=METHODS, default="estimator1")
    t.add_argument("--grid", nargs="+", type=float, required=True, help="ranks or lambda values")
    t.add_argument("--split", nargs=3, type=float, default=(4, 1, 1), metavar=("TR", "VA", "TE"))
    t.add_argument("--max-iters", type=int, default=200)
    t.add_argument("--eta0", type=float)
    t.add_argument("--tol", type=float, default=1e-4)
    return parser


def _settings(args) -> BenchSettings:
    return BenchSettings(
        ell=args.ell, reference_kind=args.reference, weight_scheme=args.weights,
        eta0=getattr(args, "eta0", None), max_iters=getattr(args, "max_iters", 200),
        tol=getattr(args, "tol", 1e-4), line_search=getattr(args, "line_search", False),
        ref_seed=args.seed, cache_dir=args.cache,
    )


def _load_observations(args):
    if args.triplets:
        data = data_io.read_triplets(args.triplets, args.rows, args.cols)
        return data.to_matrix()
    if not (args.matrix and args.mask):
        raise ValueError("give --triplets or both --matrix and --mask")
    mask = ObservationMask.from_array(data_io.read_matrix_csv(args.mask) != 0)
    y = data_io.read_matrix_csv(args.matrix, allow_nonfinite=True)
    if y.shape != mask.shape:
        raise ValueError(f"matrix {y.shape} and mask {mask.shape} differ")
    return project_mask(y, mask), mask


def cmd_gen(args, out: Path):
    sim = simulate(SimulationSpec(args.case, args.m, args.n, args.p, args.sigma, args.seed,
                                  args.signal_scale))
    data_io.write_matrix_csv(sim.y, out / "y.csv")
    data_io.write_matrix_csv(sim.mask.observed.astype(float), out / "mask.csv")
    data_io.write_matrix_csv(sim.truth, out / "truth.csv")
    data_io.write_triplets(data_io.RatingTriplets.from_matrix(sim.y, sim.mask), out / "triplets.csv")
    return {"noise_ratio": sim.noise_ratio, "p_hat": sim.mask.p_hat}


def cmd_complete(args, out: Path):
    from .baselines import BaselineConfig, baseline_factorized, baseline_nuclear
    from .solvers import SolverConfig, solve_factorized, solve_nuclear

    y, mask = _load_observations(args)
    truth = data_io.read_matrix_csv(args.truth) if args.truth else None
    factorized = args.method in ("estimator1", "baseline1")
    if factorized and args.rank is None:
        raise ValueError("--rank is required for factorized methods")
    settings = _settings(args)
    lam = args.lam
    info = {"method": args.method}
    if not factorized and lam is None:
        _, lam, log = tune_lambda(args.method, y, mask, settings, args.seed, weight_rank=args.rank)
        info["lambda_grid"] = log
    kw = dict(max_iters=args.max_iters, tol=args.tol, line_search=args.line_search)
    if args.method.startswith("estimator"):
        cfg = SolverConfig(rank_s=args.rank if factorized else None, lambda_nuc=None if factorized else lam,
                           eta0=args.eta0,
                           seed=args.seed, ell=args.ell, reference_kind=args.reference,
                           weight_scheme=args.weights, weight_rank=args.rank, cache_dir=args.cache, **kw)
        report = (solve_factorized if factorized else solve_nuclear)(y, mask, cfg, truth)
    else:
        cfg = BaselineConfig(rank_s=args.rank if factorized else None,
                             lambda_nuc=None if factorized else lam, eta0=args.eta0 or 0.25, **kw)
        report = (baseline_factorized if factorized else baseline_nuclear)(y, mask, cfg, truth)
    est = report.estimate
    if args.clip:
        est = data_io.clip_predictions(est, *args.clip)
    data_io.write_matrix_csv(est, out / "estimate.csv")
    (out / "trace.csv").write_text(report.trace_csv())
    (out / "report.json").write_text(report.to_json())
    info.update(iters_run=report.iters_run, converged=report.converged, lambda_nuc=lam)
    if args.test:
        info["test_rmse"] = data_io.rmse(est, data_io.read_triplets(args.test, *est.shape))
    return info


def cmd_denoise(args, out: Path):
    y = data_io.read_matrix_csv(args.matrix)
    m, n = max(y.shape), min(y.shape)
    lam = args.lam
    if lam is None:
        ref = cached_reference(m, n, 1.0, args.ell, args.seed, "dense", args.cache)
        sh = working_sigma(svd(y if y.shape[0] >= y.shape[1] else y.T, compute_uv=False), ref)
        lam = 2 * sh * math.sqrt(m) * (1 + math.sqrt(n / m))
    res = denoise_all(y, args.rank, lam, ell=args.ell, seed=args.seed, cache_dir=args.cache)
    for name in ("m_fac", "m_nuc", "m_rmt"):
        est = getattr(res, name)
        if args.clip:
            est = data_io.clip_predictions(est, *args.clip)
        data_io.write_matrix_csv(est, out / f"{name[2:]}.csv")
    return {"sigma_hat": res.sigma_hat, "lambda_nuc": lam}


def cmd_bench(args, out: Path):
    settings = _settings(args)
    if args.table == "table1":
        ranks, sigmas = (5, 10, 20), (0.01, 0.02, 0.05, 0.08, 0.1, 0.2, 0.3, 0.4, 0.5)
        tab = denoise_table(ranks, sigmas, args.replicates, args.seed, ell=args.ell,
                            ref_seed=args.seed, cache_dir=args.cache)
        lines = ["case,m,n,p,sigma,method,metric,mean,stderr,replicates"]
        for (r, sigma, name), (mean, se) in tab.items():
            lines.append(f"{DENOISE_CASE[r]},500,250,1.0,{sigma!r},{name},e_f,"
                         f"{float(mean)!r},{float(se)!r},{args.replicates}")
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        return {"cells": len(tab), "signal_scale": TABLE1_SIGNAL_SCALE}
    points, methods, x = preset(args.table, args.sizes)
    methods = args.methods or methods
    rows = run_benchmark(points, methods, args.replicates, out / "bench.csv", args.seed, settings,
                         args.store, args.workers, out / "plot.csv", x)
    return {"rows": len(rows)}


def cmd_spectrum(args, out: Path):
    y = data_io.read_matrix_csv(args.matrix, allow_nonfinite=True)
    mask = (ObservationMask.from_array(data_io.read_matrix_csv(args.mask) != 0)
            if args.mask else ObservationMask.full(*y.shape))
    est = data_io.read_matrix_csv(args.estimate) if args.estimate else np.zeros(y.shape)
    resid = project_mask(y, mask) - project_mask(est, mask)
    if resid.shape[0] < resid.shape[1]:
        resid = resid.T
    m, n = resid.shape
    ref = cached_reference(m, n, mask.p_hat, args.ell, args.seed, args.reference, args.cache)
    s = svd(resid, compute_uv=False)
    sh = working_sigma(s, ref)
    lines = ["index,residual,reference"]
    lines += [f"{i},{float(a)!r},{float(b)!r}" for i, (a, b) in
              enumerate(zip(s, math.sqrt(m) * sh * ref.lambda_hat))]
    (out / "spectrum.csv").write_text("\n".join(lines) + "\n")
    return {"sigma_hat": sh}


def cmd_tune(args, out: Path):
    data = data_io.read_triplets(args.triplets, args.rows, args.cols)
    total = sum(args.split)
    spec = data_io.SplitSpec(*(x / total for x in args.split), seed=args.seed)
    train, val, test = data_io.split_triplets(data, spec)
    grid = [int(g) if args.method in ("estimator1", "baseline1") else g for g in args.grid]
    best, grid_rmse, est = data_io.tune_and_fit(train, val, args.method, grid, _settings(args),
                                                clip=args.clip)
    data_io.write_matrix_csv(est, out / "estimate.csv")
    return {"best": best, "grid_rmse": grid_rmse, "test_rmse": data_io.rmse(est, test),
            "sizes": [len(train), len(val), len(test)]}


COMMANDS = {"gen": cmd_gen, "complete": cmd_complete, "denoise": cmd_denoise,
            "bench": cmd_bench, "spectrum": cmd_spectrum, "tune": cmd_tune}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](args, out)
    except Exception as exc:  # reported as one machine-readable line
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    (out / f"{args.command}.json").write_text(json.dumps(info, sort_keys=True, default=float) + "\n")
    print(json.dumps(info, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
