"""File formats, rating-triplet protocol, tuning by validation RMSE and clipping.

Matrix CSV: first line ``rows,cols`` then one comma-separated line per row.
Triplet CSV: header ``i,j,value`` then 0-based ``i,j,value`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import ObservationMask


class FormatError(ValueError):
    """Malformed input file; the message names the offending line."""


class DuplicateEntryError(FormatError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_matrix_csv(matrix, path) -> None:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise ValueError("matrix must be 2-D")
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    lines += [",".join(_fmt(x) for x in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path, allow_nonfinite: bool = False) -> np.ndarray:
    """Read a matrix CSV. ``nan`` entries are accepted only with ``allow_nonfinite``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        rows, cols = (int(x) for x in lines[0].split(","))
    except ValueError:
        raise FormatError(f"{path}:1: header must be 'rows,cols'") from None
    body = [(k + 2, line) for k, line in enumerate(lines[1:]) if line.strip()]
    if len(body) != rows:
        raise FormatError(f"{path}: header says {rows} rows, body has {len(body)}")
    out = np.empty((rows, cols))
    for r, (lineno, line) in enumerate(body):
        parts = line.split(",")
        if len(parts) != cols:
            raise FormatError(f"{path}:{lineno}: expected {cols} values, got {len(parts)}")
        try:
            out[r] = [float(x) for x in parts]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
        if not allow_nonfinite and not np.all(np.isfinite(out[r])):
            raise FormatError(f"{path}:{lineno}: non-finite value")
    return out


@dataclass(frozen=True)
class RatingTriplets:
    rows: int
    cols: int
    i: np.ndarray
    j: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        if self.i.size == 0:
            raise ValueError("need at least one triple")
        if self.i.min() < 0 or self.j.min() < 0 or self.i.max() >= self.rows or self.j.max() >= self.cols:
            raise ValueError("triplet index out of range")

    def __len__(self):
        return self.i.size

    def subset(self, idx) -> "RatingTriplets":
        return RatingTriplets(self.rows, self.cols, self.i[idx], self.j[idx], self.value[idx])

    def to_matrix(self):
        """Dense ``(y, mask)`` with zeros off the observed set."""
        y = np.zeros((self.rows, self.cols))
        obs = np.zeros((self.rows, self.cols), dtype=bool)
        y[self.i, self.j] = self.value
        obs[self.i, self.j] = True
        return y, ObservationMask.from_array(obs)

    @classmethod
    def from_matrix(cls, y, mask: ObservationMask) -> "RatingTriplets":
        i, j = np.nonzero(mask.observed)
        return cls(mask.shape[0], mask.shape[1], i, j, np.asarray(y, dtype=float)[i, j])


def read_triplets(path, rows: int | None = None, cols: int | None = None) -> RatingTriplets:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].replace(" ", "") != "i,j,value":
        raise FormatError(f"{path}:1: header must be 'i,j,value'")
    ii, jj, vv, seen = [], [], [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields")
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed triple") from None
        if i < 0 or j < 0 or (rows is not None and i >= rows) or (cols is not None and j >= cols):
            raise FormatError(f"{path}:{lineno}: index ({i},{j}) out of range")
        if not math.isfinite(v):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        if (i, j) in seen:
            raise DuplicateEntryError(f"{path}:{lineno}: duplicate entry ({i},{j}), first on line {seen[(i, j)]}")
        seen[(i, j)] = lineno
        ii.append(i), jj.append(j), vv.append(v)
    if not ii:
        raise FormatError(f"{path}: no triples")
    rows = rows if rows is not None else max(ii) + 1
    cols = cols if cols is not None else max(jj) + 1
    return RatingTriplets(rows, cols, np.array(ii), np.array(jj), np.array(vv))


def write_triplets(data: RatingTriplets, path) -> None:
    lines = ["i,j,value"]
    lines += [f"{i},{j},{_fmt(v)}" for i, j, v in zip(data.i, data.j, data.value)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 4 / 6
    val_frac: float = 1 / 6
    test_frac: float = 1 / 6
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0 or abs(sum(fr) - 1) > 1e-12:
            raise ValueError("fractions must be positive and sum to 1")


def split_sizes(total: int, fracs) -> list:
    """Floor each share, then hand leftovers to the largest remainders (ties: earlier part)."""
    raw = [f * total for f in fracs]
    sizes = [math.floor(x) for x in raw]
    order = sorted(range(len(fracs)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[: total - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_triplets(data: RatingTriplets, spec: SplitSpec):
    """Uniformly permute the triples and cut them into train, validation and test."""
    n_tr, n_va, _ = split_sizes(len(data), (spec.train_frac, spec.val_frac, spec.test_frac))
    perm = np.random.default_rng(spec.seed).permutation(len(data))
    return (data.subset(np.sort(perm[:n_tr])), data.subset(np.sort(perm[n_tr:n_tr + n_va])),
            data.subset(np.sort(perm[n_tr + n_va:])))


def rmse(est, data: RatingTriplets) -> float:
    return float(np.sqrt(np.mean((np.asarray(est)[data.i, data.j] - data.value) ** 2)))


def clip_predictions(matrix, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError("need lo <= hi")
    return np.clip(np.asarray(matrix, dtype=float), lo, hi)


def tune_and_fit(train: RatingTriplets, val: RatingTriplets, method: str, hyper_grid,
                 settings=None, clip=None):
    """Fit on ``train`` at every grid value and keep the lowest validation RMSE.

    The grid holds ranks for the factorized methods and ``lambda`` values for
    the nuclear ones. Returns ``(best_hyper, grid_rmse, estimate)``.
    """
    from .experiments import BenchSettings, fit_method

    settings = settings or BenchSettings()
    y, mask = train.to_matrix()
    factorized = method in ("estimator1", "baseline1")
    grid_rmse, best = [], (math.inf, None, None)
    for h in hyper_grid:
        if factorized:
            est = fit_method(method, y, mask, settings, int(h))
        else:
            est = fit_method(method, y, mask, settings, 0, lam=float(h))
        if clip is not None:
            est = clip_predictions(est, *clip)
        err = rmse(est, val)
        grid_rmse.append((h, err))
        if err < best[0]:
            best = (err, h, est)
    return best[1], grid_rmse, best[2]
