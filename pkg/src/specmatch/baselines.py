"""Least-squares comparators and the three denoising estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .criterion import working_sigma
from .linalg import ObservationMask, as_matrix, project_mask, soft_threshold, svd
from .reference import SpectralReference, cached_reference, rmt_signal_value
from .solvers import (
    SolverReport,
    finish,
    init_factors,
    oriented,
    record,
    rel_change,
    accept_step,
    step_scale,
)

MAX_HALVINGS = 20


@dataclass
class BaselineConfig:
    rank_s: int | None = None
    lambda_nuc: float | None = None
    max_iters: int = 200
    eta0: float = 0.25
    tol: float = 1e-4
    line_search: bool = False

    def __post_init__(self):
        if (self.rank_s is None) == (self.lambda_nuc is None):
            raise ValueError("set exactly one of rank_s and lambda_nuc")
        if self.max_iters < 1 or not self.eta0 > 0 or not self.tol > 0:
            raise ValueError("need max_iters >= 1, eta0 > 0, tol > 0")


def ls_loss(y, mask, est) -> float:
    return float(((y - project_mask(est, mask)) ** 2).sum())


def baseline_factorized(y, mask: ObservationMask, cfg: BaselineConfig, truth=None) -> SolverReport:
    """Gradient descent on ``||Y - P_Omega(R L^T)||_F^2`` from the spectral start.

    The step multiplies ``P_Omega(Y - R L^T)`` by ``eta0 / (p_hat sigma_1(M0))``,
    the same normalization the spectral solver uses.
    """
    if cfg.rank_s is None:
        raise ValueError("baseline_factorized needs rank_s")
    y, mask, truth, flipped = oriented(y, mask, truth)
    y = project_mask(y, mask)
    s = cfg.rank_s
    if s > y.shape[1]:
        raise ValueError(f"rank_s={s} exceeds min(m, n)={y.shape[1]}")
    r_fac, l_fac, sigma1 = init_factors(y, mask, s)
    est = r_fac @ l_fac.T
    # gradient is -2 P(resid) R; halve so eta0 means the same as in the solver
    base = cfg.eta0 * step_scale(1, mask.p_hat, sigma1) / 2
    shrink = 1.0
    trace, converged, k = [], False, 0
    loss = ls_loss(y, mask, est)
    while k < cfg.max_iters:
        resid = y - project_mask(est, mask)
        eta = base * shrink
        for _ in range(MAX_HALVINGS + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                r_new = r_fac + 2 * eta * resid @ l_fac
                l_new = l_fac + 2 * eta * resid.T @ r_fac
                new = r_new @ l_new.T
            new_loss = ls_loss(y, mask, new) if np.all(np.isfinite(new)) else math.inf
            if accept_step(new_loss, loss, cfg.line_search):
                break
            eta /= 2
            if not cfg.line_search:
                shrink /= 2
        else:
            trace.append(record(k, loss, math.nan, 0.0, 0.0, est, truth))
            k += 1
            break
        rc = rel_change(new, est)
        r_fac, l_fac, est = r_new, l_new, new
        trace.append(record(k, loss, math.nan, eta, rc, est, truth))
        loss = new_loss
        k += 1
        if rc < cfg.tol:
            converged = True
            break
    return finish(est, k, trace, converged, False, flipped)


def baseline_nuclear(y, mask: ObservationMask, cfg: BaselineConfig, truth=None,
                     init=None) -> SolverReport:
    """Soft-impute: ``M <- SVT_{lambda/2}(M + P_Omega(Y - M))`` from ``Y / p_hat``."""
    if cfg.lambda_nuc is None:
        raise ValueError("baseline_nuclear needs lambda_nuc")
    y, mask, truth, flipped = oriented(y, mask, truth)
    y = project_mask(y, mask)
    t = cfg.lambda_nuc / 2
    est = y / mask.p_hat if init is None else as_matrix(init.T if flipped else init)
    nuc = float(svd(est, compute_uv=False).sum())
    trace, converged, k = [], False, 0
    while k < cfg.max_iters:
        loss = ls_loss(y, mask, est) + cfg.lambda_nuc * nuc
        new, kept = soft_threshold(est + y - project_mask(est, mask), t, return_values=True)
        rc = rel_change(new, est) if est.any() else (0.0 if not new.any() else math.inf)
        est, nuc = new, float(kept.sum())
        trace.append(record(k, loss, math.nan, 1.0, rc, est, truth))
        k += 1
        if rc < cfg.tol:
            converged = True
            break
    return finish(est, k, trace, converged, False, flipped)


@dataclass(frozen=True)
class DenoiseResult:
    m_fac: np.ndarray
    m_nuc: np.ndarray
    m_rmt: np.ndarray
    sigma_hat: float


def denoise_all(y, s: int, lambda_nuc: float, ref: SpectralReference | None = None,
                ell: int = 32, seed: int = 0, cache_dir=None) -> DenoiseResult:
    """Truncated SVD, soft-thresholding and RMT shrinkage from one SVD of ``y``.

    ``sigma_hat`` is the bulk ratio estimate against a dense reference.
    """
    y = as_matrix(y)
    flipped = y.shape[0] < y.shape[1]
    if flipped:
        y = y.T
    m, n = y.shape
    if not 1 <= s <= n:
        raise ValueError(f"s={s} outside [1, {n}]")
    if ref is None:
        ref = cached_reference(m, n, 1.0, ell, seed, "dense", cache_dir)
    f = svd(y)
    sh = working_sigma(f.s, ref)
    rho = n / m
    top = slice(0, s)
    m_fac = (f.u[:, top] * f.s[top]) @ f.v[:, top].T
    d = np.maximum(f.s - lambda_nuc / 2, 0.0)
    m_nuc = (f.u * d) @ f.v.T
    shrunk = np.array([rmt_signal_value(x, sh, rho, m) for x in f.s[top]])
    m_rmt = (f.u[:, top] * shrunk) @ f.v[:, top].T
    if flipped:
        m_fac, m_nuc, m_rmt = m_fac.T, m_nuc.T, m_rmt.T
    return DenoiseResult(m_fac, m_nuc, m_rmt, sh)


def oracle_threshold(y_svd, truth) -> float:
    """Soft threshold ``t`` minimizing ``||SVT_t(Y) - truth||_F`` exactly.

    On each interval where ``k`` singular values survive the error is a
    quadratic in ``t``; the minimum over all pieces is returned.
    """
    s = y_svd.s
    a = np.einsum("ij,ij->j", y_svd.u, truth @ y_svd.v)
    best_t, best = s[0], math.inf
    cs, ca = np.cumsum(s), np.cumsum(a)
    for k in range(1, s.size + 1):
        lo = s[k] if k < s.size else 0.0
        t = min(max((cs[k - 1] - ca[k - 1]) / k, lo), s[k - 1])
        d = s[:k] - t
        val = float((d**2).sum() - 2 * (d * a[:k]).sum())
        if val < best:
            best_t, best = t, val
    return float(best_t)
