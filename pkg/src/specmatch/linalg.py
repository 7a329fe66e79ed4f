"""Dense matrix plumbing: the SVD contract, mask and rank projections, norms.

Matrices are plain two-dimensional float ``numpy`` arrays. The only
structured types are the observation mask, the SVD factors and the
incoherence summary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """Two arrays that must share a shape do not."""


class DecompositionError(RuntimeError):
    """The underlying SVD routine failed to converge."""


class DegenerateRankError(ValueError):
    """A matrix is numerically rank deficient where full rank ``r`` is needed."""


class DegenerateResidualError(ValueError):
    """A residual has an all-zero bulk spectrum (exact interpolation)."""


RANK_TOL = 1e-12


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a finite 2-D float array, raising on NaN/Inf."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


@dataclass(frozen=True)
class ObservationMask:
    """Binary pattern of observed entries.

    Attributes
    ----------
    observed : ndarray of bool, shape (m, n)
    count : int
        Number of observed entries.
    p_hat : float
        Observed fraction ``count / (m * n)``.
    """

    observed: np.ndarray
    count: int
    p_hat: float

    @classmethod
    def from_array(cls, observed) -> "ObservationMask":
        obs = np.asarray(observed, dtype=bool)
        if obs.ndim != 2:
            raise ValueError("mask must be 2-D")
        count = int(obs.sum())
        if count == 0:
            raise ValueError("mask observes no entries")
        obs = obs.copy()
        obs.setflags(write=False)
        return cls(obs, count, count / obs.size)

    @classmethod
    def full(cls, m: int, n: int) -> "ObservationMask":
        return cls.from_array(np.ones((m, n), dtype=bool))

    @property
    def shape(self):
        return self.observed.shape

    @property
    def T(self) -> "ObservationMask":
        return ObservationMask.from_array(self.observed.T)


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(s) @ v.T`` with ``s`` nonincreasing."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class IncoherenceReport:
    mu_row: float
    mu_col: float
    mu: float
    kappa: float


def svd(a, compute_uv: bool = True):
    """Thin SVD with a deterministic sign convention.

    In every column of ``u`` the first entry of largest magnitude is made
    nonnegative, and the matching column of ``v`` is flipped with it.

    Parameters
    ----------
    a : array_like, shape (m, n)
    compute_uv : bool
        If False only the singular values are returned (as an array).

    Returns
    -------
    SvdFactors or ndarray
    """
    a = as_matrix(a)
    try:
        if not compute_uv:
            return np.linalg.svd(a, compute_uv=False)
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(
            f"SVD did not converge for a {a.shape[0]}x{a.shape[1]} matrix"
        ) from exc
    if u.shape[1]:
        pivot = np.argmax(np.abs(u), axis=0)
        sign = np.sign(u[pivot, np.arange(u.shape[1])])
        sign[sign == 0] = 1.0
        u = u * sign
        vt = vt * sign[:, None]
    return SvdFactors(u, s, vt.T)


def check_shape(a: np.ndarray, shape) -> None:
    if tuple(a.shape) != tuple(shape):
        raise ShapeMismatchError(f"shape {tuple(a.shape)} does not match {tuple(shape)}")


def project_mask(a, mask: ObservationMask) -> np.ndarray:
    """Keep observed entries of ``a`` and zero the rest.

    Off-mask entries are never read arithmetically, so NaN there is harmless.
    """
    a = np.asarray(a, dtype=float)
    check_shape(a, mask.shape)
    return np.where(mask.observed, a, 0.0)


def project_rank(a, s_rank: int) -> np.ndarray:
    """Best rank-``s_rank`` approximation in Frobenius norm."""
    a = as_matrix(a)
    if not 1 <= s_rank <= min(a.shape):
        raise ValueError(f"s_rank={s_rank} outside [1, {min(a.shape)}]")
    f = svd(a)
    return (f.u[:, :s_rank] * f.s[:s_rank]) @ f.v[:, :s_rank].T


def soft_threshold(a, t: float, return_values: bool = False):
    """Singular value soft-thresholding ``SVT_t(a)``.

    With ``return_values`` the surviving singular values are returned too.
    """
    f = svd(a)
    d = np.maximum(f.s - t, 0.0)
    k = int(np.count_nonzero(d))
    out = (f.u[:, :k] * d[:k]) @ f.v[:, :k].T
    return (out, d[:k]) if return_values else out


def norms(a) -> dict:
    """Frobenius, spectral, max-abs, two-to-infinity and nuclear norms."""
    a = as_matrix(a)
    s = svd(a, compute_uv=False)
    return {
        "frobenius": float(np.linalg.norm(a)),
        "spectral": float(s[0]) if s.size else 0.0,
        "max_abs": float(np.abs(a).max()) if a.size else 0.0,
        "two_inf": float(np.sqrt((a**2).sum(axis=1)).max()) if a.size else 0.0,
        "nuclear": float(s.sum()),
    }


def incoherence(a, r: int) -> IncoherenceReport:
    """Incoherence coefficients and condition number of the top-``r`` part."""
    a = as_matrix(a)
    m, n = a.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"r={r} outside [1, {min(m, n)}]")
    f = svd(a)
    if f.s[r - 1] <= RANK_TOL * f.s[0]:
        raise DegenerateRankError(f"sigma_{r} is numerically zero")
    mu_row = m / r * float((f.u[:, :r] ** 2).sum(axis=1).max())
    mu_col = n / r * float((f.v[:, :r] ** 2).sum(axis=1).max())
    return IncoherenceReport(mu_row, mu_col, max(mu_row, mu_col), float(f.s[0] / f.s[r - 1]))


def error_norms(est, truth) -> tuple[float, float, float]:
    """Normalized Frobenius, spectral and max-abs errors ``(e_f, e_sp, e_inf)``."""
    est, truth = np.asarray(est, dtype=float), np.asarray(truth, dtype=float)
    check_shape(est, truth.shape)
    d = est - truth
    m, n = d.shape
    e_sp = float(svd(d, compute_uv=False)[0]) if d.any() else 0.0
    return float(np.linalg.norm(d) / np.sqrt(m * n)), float(e_sp / np.sqrt(m)), float(np.abs(d).max())
