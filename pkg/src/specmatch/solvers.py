"""Spectral matching estimators: factorized descent and the nuclear-norm variant.

Both solvers descend along the pseudo-gradient of the spectral loss. The
pseudo-gradient is returned exactly as the residual-side expression
``P_Omega(sum_i w_i (s_i - sqrt(m) sigma_hat lambda_i) u_i v_i^T) / (sqrt(m) sigma_hat)``
whose singular triplets belong to ``Y - P_Omega(M)``. Because the residual
depends on ``M`` with a minus sign, a descent step *adds* a multiple of it
to ``M``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .criterion import WeightVector, loss_from_singulars, make_weights
from .linalg import (
    RANK_TOL,
    DegenerateResidualError,
    ObservationMask,
    SvdFactors,
    as_matrix,
    error_norms,
    project_mask,
    project_rank,
    soft_threshold,
    svd,
)
from .reference import SpectralReference, cached_reference

MAX_HALVINGS = 20
# a fixed step is rejected when the loss grows by more than this factor
DIVERGENCE_FACTOR = 10.0


@dataclass
class SolverConfig:
    """Hyperparameters shared by the solvers and baselines.

    Attributes
    ----------
    rank_s : int, optional
        Rank for the factorized path.
    lambda_nuc : float, optional
        Nuclear penalty; singular values are thresholded at ``lambda_nuc / 2``.
    max_iters : int
        Iteration cap ``K``.
    eta0 : float, optional
        Dimensionless step, applied to the unnormalized gradient
        ``sqrt(m) sigma_hat G``. The factorized solver multiplies it by
        ``n / (p_hat sigma_1(M0))``, the nuclear solver by ``1 / (p_hat max(w))``
        so that ``eta0`` is the per-iteration gain on the most heavily weighted
        direction. Defaults: 0.25 factorized, 0.5 nuclear.
    tol : float
        Stop when ``||M_{k+1} - M_k||_F / ||M_k||_F < tol``.
    weights : WeightVector, optional
        Built from ``weight_scheme`` when omitted.
    reference : SpectralReference, optional
        Built from ``(m, n, p_hat, ell, seed, reference_kind)`` when omitted.
    line_search : bool
        Halve the step (up to 20 times) until the loss decreases. When off,
        the factorized path still halves a step whose loss would grow by more
        than ``DIVERGENCE_FACTOR`` and keeps the smaller step afterwards.
    weight_rank : int, optional
        Rank fed to the default weight builder. Falls back to ``rank_s``; the
        nuclear path uses uniform weights when neither is given.
    """

    rank_s: int | None = None
    lambda_nuc: float | None = None
    max_iters: int = 200
    eta0: float | None = None
    tol: float = 1e-4
    weights: WeightVector | None = None
    reference: SpectralReference | None = None
    seed: int = 0
    line_search: bool = False
    ell: int = 32
    reference_kind: str = "sparse"
    weight_scheme: str = "default"
    weight_rank: int | None = None
    cache_dir: str | None = None

    def __post_init__(self):
        if (self.rank_s is None) == (self.lambda_nuc is None):
            raise ValueError("set exactly one of rank_s and lambda_nuc")
        if self.rank_s is not None and self.rank_s < 1:
            raise ValueError("rank_s must be positive")
        if self.lambda_nuc is not None and self.lambda_nuc < 0:
            raise ValueError("lambda_nuc must be nonnegative")
        if self.eta0 is None:
            self.eta0 = 0.25 if self.rank_s is not None else 0.5
        if self.max_iters < 1 or not self.eta0 > 0 or not self.tol > 0:
            raise ValueError("need max_iters >= 1, eta0 > 0, tol > 0")


TRACE_FIELDS = ("iter", "loss", "sigma_hat", "step", "rel_change")
ERROR_FIELDS = ("e_f", "e_sp", "e_inf")


@dataclass
class SolverReport:
    estimate: np.ndarray
    iters_run: int
    trace: list = field(default_factory=list)
    converged: bool = False
    degenerate: bool = False
    transposed: bool = False

    def trace_csv(self) -> str:
        cols = list(TRACE_FIELDS)
        if self.trace and "e_f" in self.trace[0]:
            cols += ERROR_FIELDS
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for rec in self.trace:
            writer.writerow([rec[c] if c == "iter" else repr(float(rec[c])) for c in cols])
        return buf.getvalue()

    def to_json(self, include_estimate: bool = False) -> str:
        out = {
            "iters_run": self.iters_run,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "transposed": self.transposed,
            "trace": self.trace,
        }
        if include_estimate:
            out["estimate"] = self.estimate.tolist()
        return json.dumps(out)


# ---------------------------------------------------------------- helpers

def oriented(y, mask: ObservationMask, truth=None):
    """Transpose inputs so that ``n <= m``; returns the flag as well."""
    y = np.asarray(y, dtype=float)
    if y.shape != mask.shape:
        raise ValueError(f"y {y.shape} and mask {mask.shape} differ")
    if y.shape[0] >= y.shape[1]:
        return y, mask, truth, False
    return y.T, mask.T, (None if truth is None else np.asarray(truth).T), True


def resolve(cfg: SolverConfig, m: int, n: int, p_hat: float):
    ref = cfg.reference
    if ref is None:
        ref = cached_reference(m, n, p_hat, cfg.ell, cfg.seed, cfg.reference_kind, cfg.cache_dir)
    elif (ref.m, ref.n) != (m, n):
        raise ValueError(f"reference is {ref.m}x{ref.n}, data is {m}x{n}")
    w = cfg.weights
    if w is None:
        s_rank = cfg.weight_rank or cfg.rank_s
        scheme = cfg.weight_scheme if s_rank else "uniform"
        w = make_weights(scheme, n, min(s_rank or 1, n))
    if len(w) != n:
        raise ValueError("weight length differs from n")
    return ref, w


def residual_state(y, mask, est, ref, w, floor: float = 0.0):
    """SVD of ``Y - P_Omega(est)`` with its loss breakdown.

    A residual whose top singular value is at most ``floor`` counts as exact
    interpolation and raises ``DegenerateResidualError``.
    """
    f = svd(y - project_mask(est, mask))
    if f.s[0] <= floor:
        raise DegenerateResidualError("estimate interpolates the observations")
    return f, loss_from_singulars(f.s, ref, w, mask.p_hat)


def trial_loss(y, mask, est, ref, w) -> float:
    s = svd(y - project_mask(est, mask), compute_uv=False)
    try:
        return loss_from_singulars(s, ref, w, mask.p_hat).loss
    except DegenerateResidualError:
        return math.inf


def record(k, loss, sigma_hat, step, rel, est, truth):
    rec = {"iter": k, "loss": loss, "sigma_hat": sigma_hat, "step": step, "rel_change": rel}
    if truth is not None:
        rec.update(zip(ERROR_FIELDS, error_norms(est, truth)))
    return rec


def finish(est, k, trace, converged, degenerate, flipped):
    return SolverReport(est.T if flipped else est, k, trace, converged, degenerate, flipped)


def accept_step(trial: float, loss: float, line_search: bool) -> bool:
    """Strict decrease under line search, otherwise only reject runaway growth."""
    if line_search:
        return trial < loss
    return math.isfinite(trial) and trial <= DIVERGENCE_FACTOR * loss


def rel_change(new, old) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300))


# ---------------------------------------------------------------- public API

def init_spectral(y, mask: ObservationMask, r: int) -> np.ndarray:
    """Rank-``r`` projection of the inverse-probability weighted data."""
    return project_rank(project_mask(y, mask) / mask.p_hat, r)


def init_factors(y, mask: ObservationMask, s: int):
    """Factors ``R = U_s D_s^{1/2}`` and ``L = V_s D_s^{1/2}`` of ``Y / p_hat``."""
    f = svd(project_mask(y, mask) / mask.p_hat)
    root = np.sqrt(f.s[:s])
    return f.u[:, :s] * root, f.v[:, :s] * root, float(f.s[0])


def step_scale(n: int, p_hat: float, sigma1: float = 1.0) -> float:
    """Multiplier turning ``eta0`` into the factorized step on the unnormalized gradient."""
    return n / (p_hat * max(sigma1, 1e-300))


def pseudo_gradient(residual_svd: SvdFactors, sigma_hat: float, ref: SpectralReference,
                    w: WeightVector, mask: ObservationMask) -> np.ndarray:
    """Masked weighted sum of residual singular triplets."""
    scale = math.sqrt(ref.m) * sigma_hat
    coef = w.w * (residual_svd.s - scale * ref.lambda_hat) / scale
    return project_mask((residual_svd.u * coef) @ residual_svd.v.T, mask)


def solve_factorized(y, mask: ObservationMask, cfg: SolverConfig, truth=None,
                     callback=None) -> SolverReport:
    """Factorized spectral matching estimator.

    Simultaneous updates ``R += eta G L`` and ``L += eta G^T R`` where ``G`` is
    the pseudo-gradient, both using the factors of the current iteration.
    ``callback(k, estimate)`` is called after every accepted update.
    """
    if cfg.rank_s is None:
        raise ValueError("solve_factorized needs rank_s")
    y, mask, truth, flipped = oriented(y, mask, truth)
    y = project_mask(y, mask)
    m, n = y.shape
    s = cfg.rank_s
    if s > n:
        raise ValueError(f"rank_s={s} exceeds min(m, n)={n}")
    ref, w = resolve(cfg, m, n, mask.p_hat)
    r_fac, l_fac, sigma1 = init_factors(y, mask, s)
    est = r_fac @ l_fac.T
    # eta applies to the normalized gradient; sqrt(m) sigma_hat converts units
    base = cfg.eta0 * step_scale(n, mask.p_hat, sigma1)
    # the bilinear update can run away at a fixed step; halvings persist
    shrink = 1.0
    floor = RANK_TOL * float(np.abs(y).max())
    trace = []
    converged = degenerate = False
    k = 0
    while k < cfg.max_iters:
        try:
            f, lb = residual_state(y, mask, est, ref, w, floor)
        except DegenerateResidualError:
            degenerate = converged = True
            break
        g = pseudo_gradient(f, lb.sigma_hat, ref, w, mask)
        eta = base * shrink * math.sqrt(m) * lb.sigma_hat
        for _ in range(MAX_HALVINGS + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                r_new = r_fac + eta * g @ l_fac
                l_new = l_fac + eta * g.T @ r_fac
                new = r_new @ l_new.T
            trial = trial_loss(y, mask, new, ref, w) if np.all(np.isfinite(new)) else math.inf
            if accept_step(trial, lb.loss, cfg.line_search):
                break
            eta /= 2
            if not cfg.line_search:
                shrink /= 2
        else:
            trace.append(record(k, lb.loss, lb.sigma_hat, 0.0, 0.0, est, truth))
            k += 1
            break
        if not np.all(np.isfinite(new)):
            break
        rc = rel_change(new, est)
        r_fac, l_fac, est = r_new, l_new, new
        trace.append(record(k, lb.loss, lb.sigma_hat, eta, rc, est, truth))
        if callback is not None:
            callback(k, est.T if flipped else est)
        k += 1
        if rc < cfg.tol:
            converged = True
            break
    return finish(est, k, trace, converged, degenerate, flipped)


def solve_nuclear(y, mask: ObservationMask, cfg: SolverConfig, truth=None,
                  init=None, callback=None) -> SolverReport:
    """Nuclear-norm spectral matching estimator.

    ``M0 = SVT_{lambda/2}(Y / p_hat)``, then ``N = M + eta G`` and
    ``M = SVT_{lambda/2}(N)``. ``init`` overrides ``M0`` (warm starts).
    """
    if cfg.lambda_nuc is None:
        raise ValueError("solve_nuclear needs lambda_nuc")
    y, mask, truth, flipped = oriented(y, mask, truth)
    y = project_mask(y, mask)
    m, n = y.shape
    t = cfg.lambda_nuc / 2
    ref, w = resolve(cfg, m, n, mask.p_hat)
    if init is None:
        est = soft_threshold(y / mask.p_hat, t)
    else:
        est = as_matrix(init.T if flipped else init)
    base = cfg.eta0 / (mask.p_hat * float(w.w.max()))
    floor = RANK_TOL * float(np.abs(y).max())
    trace = []
    converged = degenerate = False
    k = 0
    while k < cfg.max_iters:
        try:
            f, lb = residual_state(y, mask, est, ref, w, floor)
        except DegenerateResidualError:
            degenerate = converged = True
            break
        g = pseudo_gradient(f, lb.sigma_hat, ref, w, mask)
        eta = base * math.sqrt(m) * lb.sigma_hat
        for _ in range(MAX_HALVINGS + 1):
            new = soft_threshold(est + eta * g, t)
            if not cfg.line_search or trial_loss(y, mask, new, ref, w) < lb.loss:
                break
            eta /= 2
        else:
            trace.append(record(k, lb.loss, lb.sigma_hat, 0.0, 0.0, est, truth))
            k += 1
            break
        if not np.all(np.isfinite(new)):
            break
        rc = rel_change(new, est) if est.any() else (0.0 if not new.any() else math.inf)
        est = new
        trace.append(record(k, lb.loss, lb.sigma_hat, eta, rc, est, truth))
        if callback is not None:
            callback(k, est.T if flipped else est)
        k += 1
        if rc < cfg.tol:
            converged = True
            break
    return finish(est, k, trace, converged, degenerate, flipped)
