"""Interval estimates and two-sample tests used across the package."""
from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy import stats as sps

Z95 = 1.959963984540054


class InsufficientDataError(ValueError):
    """Raised when a statistic is requested on too little data."""


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n <= 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def clopper_pearson(k: int, n: int, conf: float = 0.95) -> tuple[float, float]:
    a = 1 - conf
    lo = 0.0 if k == 0 else float(sps.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(sps.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def clopper_pearson_upper(k: int, n: int, conf: float = 0.95) -> float:
    """One-sided upper bound: P[Bin(n, p) <= k] = 1 - conf."""
    if k >= n:
        return 1.0
    return float(sps.beta.ppf(conf, k + 1, n - k))


def binomial_se(k: int, n: int) -> float:
    p = k / n
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def ks_2samp(a, b) -> tuple[float, float]:
    r = sps.ks_2samp(np.asarray(a, float), np.asarray(b, float))
    return float(r.statistic), float(r.pvalue)


def lag1_corr(x) -> float:
    x = np.asarray(x, float)
    if len(x) < 3:
        return 0.0
    a, b = x[:-1] - x[:-1].mean(), x[1:] - x[1:].mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def lag1_permutation_test(series_list, n_perm: int = 999, seed: int = 0) -> tuple[float, float]:
    """Pooled lag-1 correlation of within-series successive pairs.

    Each series is one trajectory's sequence of block statistics; the null
    distribution permutes values within each series.  Returns (r, p-value),
    two-sided.
    """
    series = [np.asarray(s, float) for s in series_list if len(s) >= 2]
    if not series:
        raise InsufficientDataError("no series with two or more entries")
    allv = np.concatenate(series)
    mu, sd = allv.mean(), allv.std()
    if sd == 0:
        return 0.0, 1.0
    series = [(s - mu) / sd for s in series]

    def stat(ss):
        num = sum(float(s[:-1] @ s[1:]) for s in ss)
        cnt = sum(len(s) - 1 for s in ss)
        return num / cnt

    r = stat(series)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        if abs(stat([rng.permutation(s) for s in series])) >= abs(r):
            hits += 1
    return r, (hits + 1) / (n_perm + 1)


def chi_square_uniform(counts) -> tuple[float, float]:
    counts = np.asarray(counts, float)
    r = sps.chisquare(counts)
    return float(r.statistic), float(r.pvalue)


@njit(cache=True)
def _pair_sums(z, n_a, perm):
    """Sum of |z_i - z_j| over (A,A), (B,B), (A,B) for labels given by perm."""
    n = z.shape[0]
    d = z.shape[1]
    lab = np.zeros(n, np.int64)
    for k in range(n_a, n):
        lab[perm[k]] = 1
    saa = 0.0
    sbb = 0.0
    sab = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for c in range(d):
                t = z[i, c] - z[j, c]
                r2 += t * t
            r = math.sqrt(r2)
            if lab[i] == lab[j]:
                if lab[i] == 0:
                    saa += r
                else:
                    sbb += r
            else:
                sab += r
    return saa, sbb, sab


@njit(cache=True)
def _dist_matrix(z):
    n = z.shape[0]
    out = np.zeros((n, n), np.float32)
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for c in range(z.shape[1]):
                t = z[i, c] - z[j, c]
                r2 += t * t
            out[i, j] = out[j, i] = math.sqrt(r2)
    return out


@njit(cache=True)
def _energy_from_matrix(dm, lab, n_a):
    n = dm.shape[0]
    n_b = n - n_a
    saa = 0.0
    sbb = 0.0
    sab = 0.0
    for i in range(n):
        li = lab[i]
        for j in range(i + 1, n):
            r = dm[i, j]
            if li == lab[j]:
                if li == 0:
                    saa += r
                else:
                    sbb += r
            else:
                sab += r
    return 2.0 * sab / (n_a * n_b) - 2.0 * saa / (n_a * n_a) - 2.0 * sbb / (n_b * n_b)


def energy_distance_test(a, b, n_perm: int = 199, seed: int = 0) -> tuple[float, float]:
    """Energy-distance two-sample permutation test; returns (statistic, p).

    The statistic is 2E|A-B| - E|A-A'| - E|B-B'| (V-statistic form).  For
    samples up to a few thousand points the pairwise distance matrix is held
    in float32; larger inputs recompute distances on the fly per permutation.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    if a.shape[0] == 1 and a.shape[1] > 1 and b.shape[1] != a.shape[1]:
        a, b = a.T, b.T
    n_a, n_b = len(a), len(b)
    if n_a < 2 or n_b < 2:
        raise InsufficientDataError("energy test needs two points per sample")
    z = np.ascontiguousarray(np.vstack([a, b]))
    n = n_a + n_b
    rng = np.random.default_rng(seed)
    lab0 = np.r_[np.zeros(n_a, np.int64), np.ones(n_b, np.int64)]
    if n <= 12000:
        dm = _dist_matrix(z)
        stat = _energy_from_matrix(dm, lab0, n_a)
        hits = sum(_energy_from_matrix(dm, rng.permutation(lab0), n_a) >= stat for _ in range(n_perm))
    else:
        def e(perm):
            saa, sbb, sab = _pair_sums(z, n_a, perm)
            return 2 * sab / (n_a * n_b) - 2 * saa / n_a**2 - 2 * sbb / n_b**2

        stat = e(np.arange(n))
        hits = sum(e(rng.permutation(n)) >= stat for _ in range(n_perm))
    return float(stat), (hits + 1) / (n_perm + 1)


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    if len(x) < 2:
        return float(x.mean()) if len(x) else math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))
