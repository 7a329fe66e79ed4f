"""Residual spectral matching loss and the working noise level."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import DegenerateResidualError, ShapeMismatchError, svd
from .reference import SpectralReference, bulk_indices


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative weights on ordered singular values, summing to one."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("weights must be a nonnegative vector summing to 1")
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.size


def default_weights(n: int, s_rank: int) -> WeightVector:
    """Half the mass on the first ``K = min(4 s, n)`` indices, half on the rest."""
    if not 1 <= s_rank <= n:
        raise ValueError(f"s_rank={s_rank} outside [1, {n}]")
    k = min(4 * s_rank, n)
    if k == n:
        return uniform_weights(n)
    w = np.empty(n)
    w[:k] = 1 / (2 * k)
    w[k:] = 0.5 / (n - k)
    # absorb rounding so the sum is 1 to machine precision
    w[-1] += 1.0 - w.sum()
    return WeightVector(w)


def uniform_weights(n: int) -> WeightVector:
    return WeightVector(np.full(n, 1.0 / n))


def make_weights(scheme: str, n: int, s_rank: int) -> WeightVector:
    if scheme == "default":
        return default_weights(n, s_rank)
    if scheme == "uniform":
        return uniform_weights(n)
    raise ValueError(f"unknown weight scheme {scheme!r}")


@dataclass(frozen=True)
class LossBreakdown:
    loss: float
    sigma_hat: float
    residual_singulars: np.ndarray
    per_index: np.ndarray


def working_sigma(residual_singulars, ref: SpectralReference) -> float:
    """Bulk ratio estimate of the noise standard deviation.

    ``sum_bulk s_i / (sqrt(m) * sum_bulk lambda_hat_i)``.
    """
    s = np.asarray(residual_singulars, dtype=float)
    if s.size != ref.n:
        raise ShapeMismatchError(f"{s.size} singular values for a reference of length {ref.n}")
    top = float(s[bulk_indices(ref.n)].sum())
    if top <= 0:
        raise DegenerateResidualError("residual bulk spectrum is identically zero")
    return top / (math.sqrt(ref.m) * ref.bulk_sum)


def loss_from_singulars(s, ref: SpectralReference, w: WeightVector, p_hat: float) -> LossBreakdown:
    s = np.asarray(s, dtype=float)
    sh = working_sigma(s, ref)
    scale = math.sqrt(ref.m) * sh
    per = w.w * (s - scale * ref.lambda_hat) ** 2
    # same value as sum(per) / scale**2, written in normalized form
    loss = float((w.w * (s / scale - ref.lambda_hat) ** 2).sum() / p_hat)
    return LossBreakdown(loss, sh, s, per)


def spectral_loss(residual, ref: SpectralReference, w: WeightVector, p_hat: float) -> LossBreakdown:
    """Weighted squared distance between the normalized residual spectrum and ``lambda_hat``."""
    residual = np.asarray(residual, dtype=float)
    if residual.shape != (ref.m, ref.n):
        raise ShapeMismatchError(f"residual {residual.shape} vs reference {(ref.m, ref.n)}")
    if len(w) != ref.n:
        raise ShapeMismatchError("weight length differs from reference length")
    return loss_from_singulars(svd(residual, compute_uv=False), ref, w, p_hat)
