"""Simulation design, error metrics and the benchmark harness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, baseline_factorized, baseline_nuclear, denoise_all, oracle_threshold
from .criterion import working_sigma
from .linalg import ObservationMask, error_norms, project_mask, svd
from .reference import cached_reference
from .solvers import SolverConfig, solve_factorized, solve_nuclear

CASE_RANKS = {1: 5, 2: 10, 3: 20}
METHODS = ("estimator1", "estimator2", "baseline1", "baseline2")
METRICS = ("e_f", "e_sp", "e_inf", "noise_ratio")

# Signal strength multiplying the case schedules in the denoising table.
# Calibrated per rank on a single cell (sigma = 0.5, RMT column); see README.
TABLE1_SIGNAL_SCALE = {5: 0.31, 10: 0.23, 20: 0.24}

# independent streams per replicate seed
_TRUTH, _NOISE, _MASK, _SPLIT = 0, 1, 2, 3


@dataclass(frozen=True)
class SimulationSpec:
    case_id: int
    m: int
    n: int
    p: float
    sigma: float
    seed: int = 0
    signal_scale: float = 1.0

    def __post_init__(self):
        if self.case_id not in CASE_RANKS:
            raise ValueError(f"case_id must be one of {sorted(CASE_RANKS)}")
        if not 1 <= self.n <= self.m:
            raise ValueError("need 1 <= n <= m")
        if not 0 < self.p <= 1 or self.sigma < 0:
            raise ValueError("need 0 < p <= 1 and sigma >= 0")

    @property
    def rank(self) -> int:
        return CASE_RANKS[self.case_id]


@dataclass(frozen=True)
class MetricRecord:
    e_f: float
    e_sp: float
    e_inf: float
    noise_ratio_r: float = math.nan


def case_singular_values(case_id: int, m: int, n: int, scale: float = 1.0) -> np.ndarray:
    r = CASE_RANKS[case_id]
    i = np.arange(1, r + 1)
    level = 3 + ((i + 1) / 6 if case_id == 3 else i / 3)
    return scale * level * math.sqrt(m) * (1 + math.sqrt(n / m))


def gen_truth(spec: SimulationSpec) -> np.ndarray:
    """Rank-r truth whose singular vectors come from a standard Gaussian matrix."""
    rng = np.random.default_rng([spec.seed, _TRUTH])
    f = svd(rng.standard_normal((spec.m, spec.n)))
    r = spec.rank
    sv = case_singular_values(spec.case_id, spec.m, spec.n, spec.signal_scale)
    return (f.u[:, :r] * sv) @ f.v[:, :r].T


def gen_noise(m: int, n: int, sigma: float, seed: int) -> np.ndarray:
    """Equal-variance mix of a Gaussian and a scaled Rademacher variable."""
    rng = np.random.default_rng([seed, _NOISE])
    gauss = rng.standard_normal((m, n))
    sign = rng.integers(0, 2, size=(m, n)) * 2.0 - 1.0
    return sigma / math.sqrt(2) * (gauss + sign)


def gen_mask(m: int, n: int, p: float, seed: int) -> ObservationMask:
    rng = np.random.default_rng([seed, _MASK])
    obs = rng.random((m, n)) < p
    if not obs.any():
        obs[0, 0] = True
    return ObservationMask.from_array(obs)


@dataclass
class Simulation:
    spec: SimulationSpec
    truth: np.ndarray
    noise: np.ndarray
    mask: ObservationMask
    y: np.ndarray

    @property
    def noise_ratio(self) -> float:
        return noise_ratio(self.noise, self.truth, self.spec.p, self.spec.rank)


def simulate(spec: SimulationSpec) -> Simulation:
    truth = gen_truth(spec)
    noise = gen_noise(spec.m, spec.n, spec.sigma, spec.seed)
    mask = gen_mask(spec.m, spec.n, spec.p, spec.seed)
    return Simulation(spec, truth, noise, mask, project_mask(truth + noise, mask))


def noise_ratio(noise, truth, p: float, r: int) -> float:
    """``||H|| / (sqrt(p) sigma_r(M0))`` from the realized noise."""
    h = svd(noise, compute_uv=False)[0]
    return float(h / (math.sqrt(p) * svd(truth, compute_uv=False)[r - 1]))


def metrics(est, truth) -> MetricRecord:
    return MetricRecord(*error_norms(est, truth))


# ---------------------------------------------------------------- tuning

def validation_split(mask: ObservationMask, val_frac: float, seed: int):
    """Split observed entries uniformly into train and validation masks."""
    idx = np.flatnonzero(mask.observed)
    rng = np.random.default_rng([seed, _SPLIT])
    n_val = int(round(val_frac * idx.size))
    n_val = min(max(n_val, 1), idx.size - 1)
    val_idx = rng.choice(idx, size=n_val, replace=False)
    val = np.zeros(mask.observed.size, dtype=bool)
    val[val_idx] = True
    val = val.reshape(mask.shape)
    return ObservationMask.from_array(mask.observed & ~val), ObservationMask.from_array(val)


def lambda_grid(points: int = 12, lo: float = 1e-2, hi: float = 1e2) -> np.ndarray:
    """Dimensionless multipliers of ``sigma_hat sqrt(m p_hat)``, largest first."""
    return np.geomspace(hi, lo, points)


@dataclass
class BenchSettings:
    ell: int = 32
    reference_kind: str = "sparse"
    weight_scheme: str = "default"
    eta0: float | None = None
    max_iters: int = 200
    tol: float = 1e-4
    line_search: bool = False
    grid_points: int = 12
    grid_lo: float = 1e-2
    grid_hi: float = 1e2
    val_frac: float = 0.2
    patience: int = 2
    ref_seed: int = 0
    cache_dir: str | None = None


def noise_scale(y, mask: ObservationMask, settings: BenchSettings) -> float:
    """Working sigma of the raw data, used to put lambda on a natural scale."""
    y = project_mask(y, mask)
    if y.shape[0] < y.shape[1]:
        y = y.T
    m, n = y.shape
    ref = cached_reference(m, n, mask.p_hat, settings.ell, settings.ref_seed,
                           settings.reference_kind, settings.cache_dir)
    return working_sigma(svd(y, compute_uv=False), ref)


def fit_method(method: str, y, mask: ObservationMask, settings: BenchSettings, s: int,
               lam: float | None = None, init=None, weight_rank: int | None = None):
    """Run one method with harness settings; returns the estimate array."""
    if method in ("estimator1", "estimator2"):
        cfg = SolverConfig(
            rank_s=s if method == "estimator1" else None,
            lambda_nuc=lam if method == "estimator2" else None,
            max_iters=settings.max_iters, eta0=settings.eta0, tol=settings.tol,
            seed=settings.ref_seed, line_search=settings.line_search, ell=settings.ell,
            reference_kind=settings.reference_kind, weight_scheme=settings.weight_scheme,
            weight_rank=weight_rank, cache_dir=settings.cache_dir,
        )
        if method == "estimator1":
            return solve_factorized(y, mask, cfg).estimate
        return solve_nuclear(y, mask, cfg, init=init).estimate
    cfg = BaselineConfig(
        rank_s=s if method == "baseline1" else None,
        lambda_nuc=lam if method == "baseline2" else None,
        max_iters=settings.max_iters, eta0=settings.eta0 or 0.25, tol=settings.tol,
        line_search=settings.line_search,
    )
    if method == "baseline1":
        return baseline_factorized(y, mask, cfg).estimate
    return baseline_nuclear(y, mask, cfg, init=init).estimate


def tune_lambda(method: str, y, mask: ObservationMask, settings: BenchSettings, seed: int,
                weight_rank: int | None = None):
    """Pick the lambda multiplier on an 80/20 split, then refit on all observations.

    The grid is walked from the largest multiplier down with warm starts and
    stops once validation error has risen above the best ``patience`` times.
    The full-data refit starts from the training fit at the chosen multiplier.
    Returns ``(estimate, lambda_full, grid_log)``.
    """
    train, val = validation_split(mask, settings.val_frac, seed)
    scale_tr = noise_scale(y, train, settings) * math.sqrt(max(y.shape) * train.p_hat)
    best = (math.inf, None, None)
    worse, prev, log = 0, None, []
    for c in lambda_grid(settings.grid_points, settings.grid_lo, settings.grid_hi):
        est = fit_method(method, project_mask(y, train), train, settings, 0,
                         lam=c * scale_tr, init=prev, weight_rank=weight_rank)
        err = float(np.mean((est - y)[val.observed] ** 2))
        log.append((float(c), err))
        prev = est
        if err < best[0]:
            best, worse = (err, c, est), 0
        elif err > best[0]:
            worse += 1
            if worse >= settings.patience:
                break
    _, c_best, warm = best
    lam_full = c_best * noise_scale(y, mask, settings) * math.sqrt(max(y.shape) * mask.p_hat)
    est = fit_method(method, y, mask, settings, 0, lam=lam_full, init=warm, weight_rank=weight_rank)
    return est, lam_full, log


# ---------------------------------------------------------------- harness

@dataclass(frozen=True)
class BenchPoint:
    case_id: int
    m: int
    n: int
    p: float
    sigma: float
    s: int | None = None
    signal_scale: float = 1.0

    @property
    def rank(self) -> int:
        return CASE_RANKS[self.case_id]

    @property
    def used_rank(self) -> int:
        return self.s if self.s is not None else self.rank

    def spec(self, seed: int) -> SimulationSpec:
        return SimulationSpec(self.case_id, self.m, self.n, self.p, self.sigma, seed, self.signal_scale)


def run_replicate(point: BenchPoint, method: str, seed: int, settings: BenchSettings) -> MetricRecord:
    sim = simulate(point.spec(seed))
    if method in ("estimator2", "baseline2"):
        est = tune_lambda(method, sim.y, sim.mask, settings, seed, weight_rank=point.rank)[0]
    else:
        est = fit_method(method, sim.y, sim.mask, settings, point.used_rank)
    return replace(metrics(est, sim.truth), noise_ratio_r=sim.noise_ratio)


# noise levels giving noise ratios of roughly 0.1 .. 1.5 for case 1 at m = 500, p = 0.2
CROSSOVER_SIGMAS = (0.15, 0.45, 0.75, 1.05, 1.35, 1.65, 1.95, 2.25)


def preset(name: str, sizes=None):
    """Benchmark grids: ``(points, methods, x_field)`` for the standard studies."""
    if name == "table2":
        points = [BenchPoint(1, m, m // 2, 0.2, 1.0) for m in (sizes or (200, 300, 400, 500))]
        return points, list(METHODS), "m"
    if name == "table3":
        points = [BenchPoint(1, 500, 250, 0.2, 1.0, s=s) for s in range(5, 12)]
        return points, ["estimator1", "baseline1"], "s"
    if name == "crossover":
        points = [BenchPoint(1, 500, 250, 0.2, s) for s in CROSSOVER_SIGMAS]
        return points, ["estimator1", "baseline1"], "noise_ratio"
    raise ValueError(f"unknown preset {name!r}")


def _store_key(point: BenchPoint, method: str, settings: BenchSettings) -> str:
    blob = json.dumps([asdict(point), method, {k: v for k, v in asdict(settings).items()
                                                if k != "cache_dir"}], sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


class ResultStore:
    """Append-only JSON-lines store of replicate metrics, keyed by configuration.

    Reruns with the same point, method and settings reuse finished replicates;
    all values are deterministic functions of the key and replicate seed.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key):
        return self.root / f"{key}.jsonl"

    def load(self, key) -> dict:
        path = self._path(key)
        if not path.exists():
            return {}
        out = {}
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                out[rec["seed"]] = MetricRecord(*rec["metrics"])
        return out

    def add(self, key, seed: int, rec: MetricRecord, meta: dict):
        with self._path(key).open("a") as fh:
            fh.write(json.dumps({"seed": seed, "metrics": list(asdict(rec).values()), **meta}) + "\n")


def _job(args):
    point, method, seed, settings = args
    return run_replicate(point, method, seed, settings)


def method_label(method: str, point: BenchPoint) -> str:
    return method if point.s is None else f"{method}@s={point.s}"


def summarize(recs: list) -> dict:
    out = {}
    for name, attr in zip(METRICS, ("e_f", "e_sp", "e_inf", "noise_ratio_r")):
        vals = np.array([getattr(r, attr) for r in recs], dtype=float)
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[name] = (float(vals.mean()), se)
    return out


def run_benchmark(points, methods, replicates: int = 100, out_path=None, master_seed: int = 0,
                  settings: BenchSettings | None = None, store_dir=None, workers: int = 1,
                  plot_path=None, x_field: str = "m", progress=None) -> list:
    """Mean and standard error of every metric per (point, method).

    Replicate ``i`` uses seed ``master_seed + i`` for truth, noise, mask and
    split, shared by all methods. Rows follow the benchmark CSV schema.
    """
    settings = settings or BenchSettings()
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods {sorted(bad)}")
    store = ResultStore(store_dir) if store_dir is not None else None
    seeds = [master_seed + i for i in range(replicates)]
    rows = []
    for point in points:
        for method in methods:
            key = _store_key(point, method, settings)
            done = store.load(key) if store else {}
            todo = [s for s in seeds if s not in done]
            jobs = [(point, method, s, settings) for s in todo]
            if workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(workers) as ex:
                    results = list(ex.map(_job, jobs))
            else:
                results = []
                for job in jobs:
                    results.append(_job(job))
                    if store:
                        store.add(key, job[2], results[-1], {"method": method})
                    if progress:
                        progress(point, method, job[2], results[-1])
            if workers > 1 and store:
                for s, rec in zip(todo, results):
                    store.add(key, s, rec, {"method": method})
            done.update(zip(todo, results))
            summary = summarize([done[s] for s in seeds])
            for metric, (mean, se) in summary.items():
                rows.append({
                    "case": point.case_id, "m": point.m, "n": point.n, "p": point.p,
                    "sigma": point.sigma, "method": method_label(method, point),
                    "metric": metric, "mean": mean, "stderr": se, "replicates": replicates,
                    "_x": {"m": point.m, "s": point.used_rank, "sigma": point.sigma,
                           "noise_ratio": summary["noise_ratio"][0]}[x_field],
                    "_series": f"{method}/r={point.rank}",
                })
    if out_path is not None:
        write_benchmark_csv(rows, out_path)
    if plot_path is not None:
        write_plot_csv(rows, plot_path)
    return rows


BENCH_COLUMNS = ("case", "m", "n", "p", "sigma", "method", "metric", "mean", "stderr", "replicates")


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in BENCH_COLUMNS])


def write_plot_csv(rows, path, metric: str = "e_f") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "series"))
        for r in rows:
            if r["metric"] == metric:
                w.writerow((repr(float(r["_x"])), repr(r["mean"]), r["_series"]))


def lookup(rows, method: str, metric: str = "e_f", **where):
    """Pick ``(mean, stderr)`` from benchmark rows."""
    for r in rows:
        if r["method"] == method and r["metric"] == metric and all(r[k] == v for k, v in where.items()):
            return r["mean"], r["stderr"]
    raise KeyError((method, metric, where))


# ---------------------------------------------------------------- denoising table

DENOISE_CASE = {5: 1, 10: 2, 20: 3}


def denoise_replicate(r: int, sigma: float, seed: int, m: int = 500, n: int = 250,
                      signal_scale: float | None = None, ell: int = 32, ref_seed: int = 0,
                      cache_dir=None) -> dict:
    """Errors of the three denoisers on one fully observed replicate.

    The soft-threshold level is the oracle one for the realized data.
    """
    scale = TABLE1_SIGNAL_SCALE[r] if signal_scale is None else signal_scale
    spec = SimulationSpec(DENOISE_CASE[r], m, n, 1.0, sigma, seed, scale)
    sim = simulate(spec)
    t = oracle_threshold(svd(sim.y), sim.truth)
    ref = cached_reference(m, n, 1.0, ell, ref_seed, "dense", cache_dir)
    res = denoise_all(sim.y, r, 2 * t, ref=ref)
    return {name: metrics(est, sim.truth).e_f
            for name, est in (("rmt", res.m_rmt), ("fac", res.m_fac), ("nuc", res.m_nuc))}


def denoise_table(ranks, sigmas, replicates: int = 100, master_seed: int = 0, **kw) -> dict:
    """``{(r, sigma, method): (mean, stderr)}`` of the Frobenius error."""
    out = {}
    for r in ranks:
        for sigma in sigmas:
            errs = [denoise_replicate(r, sigma, master_seed + i, **kw) for i in range(replicates)]
            for name in ("rmt", "fac", "nuc"):
                v = np.array([e[name] for e in errs])
                se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
                out[(r, sigma, name)] = (float(v.mean()), se)
    return out
