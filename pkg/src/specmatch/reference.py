"""Sparse Gaussian reference spectra, the Marchenko-Pastur law and RMT shrinkage."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from .linalg import svd


def bulk_indices(n: int) -> np.ndarray:
    """0-based indices of the bulk ``ceil(n/3) .. floor(2n/3)`` (1-based, inclusive)."""
    lo, hi = math.ceil(n / 3), (2 * n) // 3
    if hi < lo:
        # tiny n: fall back to the middle singular value
        lo = hi = max(1, (n + 1) // 2)
    return np.arange(lo - 1, hi)


@dataclass(frozen=True)
class SpectralReference:
    """Monte Carlo estimate of the expected ordered singular values.

    ``lambda_hat`` refers to the ensemble with entries ``N(0, 1/m)`` masked
    by ``Bernoulli(p)``.
    """

    lambda_hat: np.ndarray
    m: int
    n: int
    p: float
    ell: int
    seed: int
    kind: str = "sparse"

    @property
    def bulk_sum(self) -> float:
        return float(self.lambda_hat[bulk_indices(self.n)].sum())


@dataclass(frozen=True)
class MpParams:
    sigma: float
    rho: float

    def __post_init__(self):
        if not self.sigma > 0 or not 0 < self.rho <= 1:
            raise ValueError("need sigma > 0 and 0 < rho <= 1")

    @property
    def lambda_minus(self) -> float:
        return self.sigma * (1 - math.sqrt(self.rho))

    @property
    def lambda_plus(self) -> float:
        return self.sigma * (1 + math.sqrt(self.rho))


def sample_sparse_gaussian(m: int, n: int, p: float, rng_seed: int) -> np.ndarray:
    """Draw ``Phi * Omega`` with ``Phi ~ N(0, 1/m)`` and ``Omega ~ Bernoulli(p)``."""
    if not 0 < p <= 1:
        raise ValueError(f"p={p} must lie in (0, 1]")
    rng = np.random.default_rng(rng_seed)
    a = rng.standard_normal((m, n)) / math.sqrt(m)
    if p < 1:
        a *= rng.random((m, n)) < p
    return a


def estimate_reference(m: int, n: int, p: float, ell: int = 32, seed: int = 0,
                       kind: str = "sparse") -> SpectralReference:
    """Average the ordered singular values of ``ell`` ensemble draws.

    Replicate ``i`` uses seed ``seed + i``. With ``kind="dense"`` the draws are
    unmasked and the averaged spectrum is rescaled by ``sqrt(p)``.
    """
    if ell < 1 or m < 1 or n < 1 or n > m:
        raise ValueError(f"invalid reference dimensions m={m}, n={n}, ell={ell}")
    if kind not in ("sparse", "dense"):
        raise ValueError(f"unknown reference kind {kind!r}")
    draw_p = p if kind == "sparse" else 1.0
    total = np.zeros(n)
    for i in range(ell):
        total += svd(sample_sparse_gaussian(m, n, draw_p, seed + i), compute_uv=False)
    lam = total / ell
    if kind == "dense":
        lam = lam * math.sqrt(p)
    return SpectralReference(lam, m, n, float(p), ell, seed, kind)


def _cache_name(m, n, p, ell, seed, kind):
    return f"ref_{kind}_{m}x{n}_p{p:.4f}_l{ell}_s{seed}.csv"


def write_reference(ref: SpectralReference, path) -> None:
    path = Path(path)
    lines = [f"# {ref.m},{ref.n},{float(ref.p)!r},{ref.ell},{ref.seed}"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(ref.lambda_hat)]
    path.write_text("\n".join(lines) + "\n")


def read_reference(path, kind: str = "sparse") -> SpectralReference:
    text = Path(path).read_text().splitlines()
    m, n, p, ell, seed = text[0].lstrip("#").strip().split(",")
    vals = np.array([float(line.split(",")[1]) for line in text[1:] if line.strip()])
    return SpectralReference(vals, int(m), int(n), float(p), int(ell), int(seed), kind)


def cached_reference(m: int, n: int, p: float, ell: int = 32, seed: int = 0,
                     kind: str = "sparse", cache_dir=None) -> SpectralReference:
    """Reference at ``round(p, 4)``, read from or stored in ``cache_dir`` if given."""
    p = round(float(p), 4)
    if cache_dir is None:
        return _memo_reference(m, n, p, ell, seed, kind)
    path = Path(cache_dir) / _cache_name(m, n, p, ell, seed, kind)
    if path.exists():
        return read_reference(path, kind)
    ref = _memo_reference(m, n, p, ell, seed, kind)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_reference(ref, path)
    return ref


@functools.lru_cache(maxsize=64)
def _memo_reference(m, n, p, ell, seed, kind) -> SpectralReference:
    ref = estimate_reference(m, n, p, ell, seed, kind)
    # shared between callers, so freeze the array
    ref.lambda_hat.flags.writeable = False
    return ref


def mp_density(x, params: MpParams):
    """Limiting density of the singular values of ``H / sqrt(m)``."""
    x = np.asarray(x, dtype=float)
    lm, lp = params.lambda_minus, params.lambda_plus
    inside = (x > lm) & (x < lp) & (x > 0)
    xs = np.where(inside, x, 1.0)
    val = np.sqrt(np.clip((lp**2 - xs**2) * (xs**2 - lm**2), 0, None)) / (params.rho * xs)
    out = np.where(inside, val / (math.pi * params.sigma**2), 0.0)
    return float(out) if out.ndim == 0 else out


def mp_cdf(x, params: MpParams):
    """Distribution function of :func:`mp_density` by adaptive quadrature."""
    lm, lp = params.lambda_minus, params.lambda_plus

    def one(t):
        if t <= lm:
            return 0.0
        if t >= lp:
            return 1.0
        return integrate.quad(lambda u: mp_density(u, params), lm, t, limit=200)[0]

    x = np.asarray(x, dtype=float)
    out = np.array([one(t) for t in x.ravel()]).reshape(x.shape)
    return float(out) if out.ndim == 0 else out


def rmt_signal_value(sigma_obs: float, sigma_hat: float, rho: float, m: int) -> float:
    """Debiased signal singular value from an observed one.

    Returns 0 below the detection edge ``sigma_hat * (1 + sqrt(rho)) * sqrt(m)``.
    """
    a = sigma_hat**2 * (1 + rho) * m
    if sigma_obs**2 < sigma_hat**2 * (1 + math.sqrt(rho)) ** 2 * m:
        return 0.0
    # above the edge the discriminant is nonnegative; clip rounding noise
    disc = max((a - sigma_obs**2) ** 2 - 4 * sigma_hat**4 * rho * m**2, 0.0)
    return math.sqrt(max(0.5 * ((sigma_obs**2 - a) + math.sqrt(disc)), 0.0))
