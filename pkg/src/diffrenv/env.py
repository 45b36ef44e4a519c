"""Random environments built from a marked Poisson bump field.

The drift is

    b(x, w) = base_drift + sum_i m_i * phi((x - xi_i) / (R/2))

clipped radially to |b| <= drift_bound, where {xi_i} is a homogeneous Poisson
process with intensity ``bump_intensity``, m_i are i.i.d. marks and
phi(u) = (1 - |u|^2)^3 on the unit ball.  Points are generated lazily per
lattice cell of side R from counter-based hashes of
(master_seed, env_index, cell), so the field at x only depends on points
within R/2 of x and two sets more than R apart see disjoint point sets.

In ``scalar_field`` mode the diffusion matrix is s(x) * Id with
s = clamp(1 + sum_i eta_i phi(...), nu^-1/2, nu^1/2) built from the same
points with independent scalar marks eta_i.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy import special, stats

from .rng import derive, env_key, normal, seed_to_u64, uniform

AMPLITUDE_KINDS = ("constant", "symmetric_pm", "uniform_ball", "uniform_box")
SIGMA_MODES = ("identity", "scalar_field")

# max |grad phi| for phi(u) = (1 - |u|^2)^3, attained at |u| = 1/sqrt(5)
PHI_GRAD_MAX = 96.0 / (25.0 * math.sqrt(5.0))
# tail level for the local point count used in the Lipschitz bound
LIPSCHITZ_TAIL = 1e-9
MAX_POINTS_PER_CELL = 64

P_DIM, P_R, P_BBAR, P_LAM, P_KIND, P_SCALE, P_SMODE, P_SAMP, P_NU = range(9)
P_VEC = 9


class SpecError(ValueError):
    """Raised when a specification violates its invariants.

    ``problems`` lists every offending field.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class AmplitudeLaw:
    """Law of the bump marks m_i.

    kinds: ``constant`` (m = high), ``symmetric_pm`` (m = +-high with equal
    probability), ``uniform_ball`` (uniform in the ball of radius ``scale``),
    ``uniform_box`` (uniform in the box [low, high]).
    """

    kind: str = "uniform_ball"
    low: tuple = ()
    high: tuple = ()
    scale: float = 0.0

    def max_norm(self) -> float:
        if self.kind == "uniform_ball":
            return float(self.scale)
        if self.kind == "uniform_box":
            corners = np.maximum(np.abs(self.low), np.abs(self.high))
            return float(np.linalg.norm(corners))
        return float(np.linalg.norm(self.high))

    def mean_norm(self, d: int, n: int = 20000) -> float:
        """E|m|, exact where cheap, otherwise by a fixed quasi-sample."""
        if self.kind in ("constant", "symmetric_pm"):
            return float(np.linalg.norm(self.high))
        if self.kind == "uniform_ball":
            return float(self.scale) * d / (d + 1.0)
        rng = np.random.default_rng(12345)
        lo, hi = np.asarray(self.low, float), np.asarray(self.high, float)
        return float(np.linalg.norm(lo + (hi - lo) * rng.random((n, d)), axis=1).mean())

    def to_string(self) -> str:
        fmt = lambda v: ", ".join(repr(float(a)) for a in v)  # noqa: E731
        if self.kind == "uniform_ball":
            return f"uniform_ball: {float(self.scale)!r}"
        if self.kind == "uniform_box":
            return f"uniform_box: {fmt(self.low)} | {fmt(self.high)}"
        return f"{self.kind}: {fmt(self.high)}"

    @classmethod
    def parse(cls, text: str) -> "AmplitudeLaw":
        """Parse ``kind: args``; e.g. ``uniform_box: 0, -0.4 | 0.4, 0.4``."""
        m = re.fullmatch(r"\s*(\w+)\s*:\s*(.*?)\s*", text)
        if not m:
            raise SpecError([f"bump_amplitude_law: cannot parse {text!r}"])
        kind, args = m.group(1), m.group(2)
        vec = lambda s: tuple(float(a) for a in s.split(",") if a.strip())  # noqa: E731
        try:
            if kind == "uniform_ball":
                return cls(kind, scale=float(args))
            if kind == "uniform_box":
                lo, hi = args.split("|")
                return cls(kind, low=vec(lo), high=vec(hi))
            if kind in ("constant", "symmetric_pm"):
                return cls(kind, high=vec(args))
        except ValueError as exc:
            raise SpecError([f"bump_amplitude_law: {exc}"]) from None
        raise SpecError([f"bump_amplitude_law: unknown kind {kind!r}"])


@dataclass(frozen=True)
class EnvironmentSpec:
    dimension: int = 2
    range: float = 1.0
    drift_bound: float = 1.0
    lipschitz_K: float = 50.0
    ellipticity_nu: float = 1.0
    base_drift: tuple = (0.0, 0.0)
    bump_intensity: float = 0.0
    bump_amplitude_law: AmplitudeLaw = field(default_factory=lambda: AmplitudeLaw("uniform_ball", scale=0.0))
    sigma_mode: str = "identity"
    sigma_amplitude: float = 0.0
    master_seed: int = 0

    # -- analytic quantities -------------------------------------------------
    def bump_volume(self) -> float:
        """Volume of the support ball of one bump, radius R/2."""
        d, r = self.dimension, self.range / 2.0
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d

    def bump_integral(self) -> float:
        """Integral of phi((x - xi)/(R/2)) over R^d."""
        d = self.dimension
        unit = math.pi ** (d / 2) * special.gamma(4.0) / special.gamma(d / 2 + 4.0)
        return float(unit * (self.range / 2.0) ** d)

    def local_count_bound(self) -> int:
        """High quantile of the number of bumps covering a point."""
        mu = self.bump_intensity * self.bump_volume()
        if mu <= 0:
            return 0
        return max(1, int(stats.poisson.ppf(1.0 - LIPSCHITZ_TAIL, mu)))

    def lipschitz_bound(self) -> float:
        """Bound on the Lipschitz constant of b plus that of sigma.

        Each bump has gradient at most |m| * PHI_GRAD_MAX * 2/R; the number
        of bumps covering a point is bounded by a Poisson quantile at level
        1 - 1e-9.  Radial clipping and clamping are 1-Lipschitz.
        """
        q = self.local_count_bound()
        slope = PHI_GRAD_MAX * 2.0 / self.range
        lip_b = self.bump_amplitude_law.max_norm() * slope * q
        lip_s = self.sigma_amplitude * slope * q if self.sigma_mode == "scalar_field" else 0.0
        return lip_b + lip_s

    def expected_drift_norm(self) -> float:
        law = self.bump_amplitude_law
        return float(np.linalg.norm(self.base_drift)) + self.bump_intensity * law.mean_norm(
            self.dimension
        ) * self.bump_integral()

    def problems(self) -> list[str]:
        """Every violated invariant, as ``field: reason`` strings."""
        out = []
        d = self.dimension
        if not (isinstance(d, (int, np.integer)) and d >= 1):
            return [f"dimension: must be a positive integer, got {d!r}"]
        if not self.range > 0:
            out.append("range: must be > 0")
        if not self.drift_bound > 0:
            out.append("drift_bound: must be > 0")
        if not self.lipschitz_K > 0:
            out.append("lipschitz_K: must be > 0")
        if not self.ellipticity_nu >= 1:
            out.append("ellipticity_nu: must be >= 1")
        if len(self.base_drift) != d:
            out.append(f"base_drift: needs {d} components")
        elif np.linalg.norm(self.base_drift) > self.drift_bound:
            out.append("base_drift: |base_drift| exceeds drift_bound")
        if self.bump_intensity < 0:
            out.append("bump_intensity: must be >= 0")
        elif self.bump_intensity * self.range**d > 20:
            out.append("bump_intensity: more than 20 expected points per cell")
        law = self.bump_amplitude_law
        if law.kind not in AMPLITUDE_KINDS:
            out.append(f"bump_amplitude_law: unknown kind {law.kind!r}")
        elif law.kind == "uniform_box" and (len(law.low) != d or len(law.high) != d):
            out.append(f"bump_amplitude_law: box corners need {d} components")
        elif law.kind == "uniform_box" and np.any(np.asarray(law.low) > np.asarray(law.high)):
            out.append("bump_amplitude_law: low corner exceeds high corner")
        elif law.kind in ("constant", "symmetric_pm") and len(law.high) != d:
            out.append(f"bump_amplitude_law: vector needs {d} components")
        elif law.kind == "uniform_ball" and law.scale < 0:
            out.append("bump_amplitude_law: radius must be >= 0")
        if self.sigma_mode not in SIGMA_MODES:
            out.append(f"sigma_mode: must be one of {SIGMA_MODES}")
        if self.sigma_amplitude < 0:
            out.append("sigma_amplitude: must be >= 0")
        if not out:
            bound = self.lipschitz_bound()
            if bound > self.lipschitz_K:
                out.append(
                    f"lipschitz_K: analytic Lipschitz bound {bound:.4g} "
                    f"(max|m| * {PHI_GRAD_MAX:.4f} * 2/R * {self.local_count_bound()} "
                    f"covering bumps) exceeds lipschitz_K={self.lipschitz_K:g}"
                )
        return out

    def warnings(self) -> list[str]:
        if self.problems():
            return []
        e = self.expected_drift_norm()
        if e > 0.8 * self.drift_bound:
            return [f"expected drift magnitude {e:.3g} exceeds 0.8*drift_bound; clipping is not negligible"]
        return []

    def check(self) -> "EnvironmentSpec":
        probs = self.problems()
        if probs:
            raise SpecError(probs)
        return self

    # -- kernel parameters ---------------------------------------------------
    def params(self) -> np.ndarray:
        d = self.dimension
        law = self.bump_amplitude_law
        fp = np.zeros(P_VEC + 3 * d)
        fp[P_DIM] = d
        fp[P_R] = self.range
        fp[P_BBAR] = self.drift_bound
        fp[P_LAM] = self.bump_intensity
        fp[P_KIND] = AMPLITUDE_KINDS.index(law.kind)
        fp[P_SCALE] = law.scale
        fp[P_SMODE] = SIGMA_MODES.index(self.sigma_mode)
        fp[P_SAMP] = self.sigma_amplitude
        fp[P_NU] = self.ellipticity_nu
        fp[P_VEC : P_VEC + d] = self.base_drift
        if law.kind == "uniform_box":
            fp[P_VEC + d : P_VEC + 2 * d] = law.low
        if law.high:
            fp[P_VEC + 2 * d : P_VEC + 3 * d] = law.high
        return fp

    @property
    def seed(self) -> np.uint64:
        return seed_to_u64(self.master_seed)

    def scaled(self, factor: float) -> "EnvironmentSpec":
        """Same spec with base drift and all marks multiplied by ``factor``."""
        law = self.bump_amplitude_law
        new_law = AmplitudeLaw(
            law.kind,
            tuple(factor * a for a in law.low),
            tuple(factor * a for a in law.high),
            factor * law.scale,
        )
        if law.kind == "uniform_box" and factor < 0:
            new_law = AmplitudeLaw(law.kind, new_law.high, new_law.low, new_law.scale)
        return _replace(
            self,
            base_drift=tuple(factor * a for a in self.base_drift),
            bump_amplitude_law=new_law,
            lipschitz_K=self.lipschitz_K * max(1.0, abs(factor)),
            drift_bound=self.drift_bound * max(1.0, abs(factor)),
        )


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


# --------------------------------------------------------------------------
# kernels


@njit(cache=True, inline="always")
def _poisson(u, mu):
    k = 0
    p = math.exp(-mu)
    cdf = p
    while u > cdf and k < MAX_POINTS_PER_CELL:
        k += 1
        p *= mu / k
        cdf += p
    return k


@njit(cache=True, inline="always")
def _mark(fp, kind, d, ck, mk, j, i):
    """Component i of the mark of point j (fresh hashes each call)."""
    if kind == 0:
        return fp[P_VEC + 2 * d + i]
    if kind == 1:
        return fp[P_VEC + 2 * d + i] if uniform(mk, j) < 0.5 else -fp[P_VEC + 2 * d + i]
    if kind == 2:
        nrm = 0.0
        for k in range(d):
            g = normal(mk, j * d + k)
            nrm += g * g
        return fp[P_SCALE] * uniform(derive(ck, 3), j) ** (1.0 / d) / math.sqrt(nrm) * normal(mk, j * d + i)
    lo_m = fp[P_VEC + d + i]
    return lo_m + (fp[P_VEC + 2 * d + i] - lo_m) * uniform(mk, j * d + i)


@njit(cache=True, inline="always")
def _cell_key(key, x, R, mask, d):
    """Key of the cell selected by ``mask`` among those touching B(x, R/2); 0 if none."""
    ck = key
    for i in range(d):
        c = math.floor((x[i] - 0.5 * R) / R) + ((mask >> i) & 1)
        if c > math.floor((x[i] + 0.5 * R) / R):
            return np.uint64(0), False
        ck = derive(ck, np.int64(c))
    return ck, True


@njit(cache=True, inline="always")
def _finish(fp, d, bout, sacc):
    nb = 0.0
    for i in range(d):
        nb += bout[i] * bout[i]
    nb = math.sqrt(nb)
    if nb > fp[P_BBAR]:
        f = fp[P_BBAR] / nb
        for i in range(d):
            bout[i] *= f
    if fp[P_SMODE] == 0:
        return 1.0
    s = 1.0 + sacc
    return min(max(s, fp[P_NU] ** -0.5), fp[P_NU] ** 0.5)


@njit(cache=True, inline="always")
def eval_env(x, fp, key, bout):
    """Write b(x) into ``bout`` and return the scalar diffusion factor s(x).

    Same point set as ``cell_points``, generated inline without allocation.
    """
    d = int(fp[P_DIM])
    R = fp[P_R]
    inv_half = 2.0 / R
    sacc = 0.0
    for i in range(d):
        bout[i] = fp[P_VEC + i]
    if fp[P_LAM] > 0:
        mu = fp[P_LAM] * R**d
        kind = int(fp[P_KIND])
        for mask in range(1 << d):
            ck, ok = _cell_key(key, x, R, mask, d)
            if not ok:
                continue
            n = _poisson(uniform(ck, 0), mu)
            lk = derive(ck, 1)
            mk = derive(ck, 2)
            for j in range(n):
                r2 = 0.0
                for i in range(d):
                    c = math.floor((x[i] - 0.5 * R) / R) + ((mask >> i) & 1)
                    z = (x[i] - (c + uniform(lk, j * d + i)) * R) * inv_half
                    r2 += z * z
                if r2 >= 1.0:
                    continue
                w = (1.0 - r2) ** 3
                for i in range(d):
                    bout[i] += w * _mark(fp, kind, d, ck, mk, j, i)
                if fp[P_SMODE] != 0:
                    sacc += w * (fp[P_SAMP] * (2.0 * uniform(derive(ck, 4), j) - 1.0))
    return _finish(fp, d, bout, sacc)


CACHE_SLOT = MAX_POINTS_PER_CELL


@njit(cache=True)
def new_cache(d):
    """Point cache for the 3^d cells around the current cell of a moving query."""
    nslot = 3**d
    meta = np.zeros(d + 2, np.int64)  # current cell (d), valid flag, unused
    counts = np.zeros(nslot, np.int64)
    locs = np.zeros((nslot, CACHE_SLOT, d))
    marks = np.zeros((nslot, CACHE_SLOT, d))
    smarks = np.zeros((nslot, CACHE_SLOT))
    keys = np.zeros(1, np.uint64)
    return meta, counts, locs, marks, smarks, keys


@njit(cache=True)
def _fill_cache(fp, key, cache, cur):
    meta, counts, locs, marks, smarks, keys = cache
    d = int(fp[P_DIM])
    R = fp[P_R]
    mu = fp[P_LAM] * R**d
    kind = int(fp[P_KIND])
    nslot = 3**d
    for slot in range(nslot):
        ck = key
        rem = slot
        for i in range(d):
            ck = derive(ck, np.int64(cur[i] - 1 + rem % 3))
            rem //= 3
        n = _poisson(uniform(ck, 0), mu)
        counts[slot] = n
        lk = derive(ck, 1)
        mk = derive(ck, 2)
        rem = slot
        for i in range(d):
            c = cur[i] - 1 + rem % 3
            rem //= 3
            for j in range(n):
                locs[slot, j, i] = (c + uniform(lk, j * d + i)) * R
        for j in range(n):
            for i in range(d):
                marks[slot, j, i] = _mark(fp, kind, d, ck, mk, j, i)
            smarks[slot, j] = fp[P_SAMP] * (2.0 * uniform(derive(ck, 4), j) - 1.0)
    for i in range(d):
        meta[i] = cur[i]
    meta[d] = 1
    keys[0] = key


@njit(cache=True, inline="always")
def eval_env_cached(x, fp, key, bout, cache):
    """``eval_env`` through a per-walker point cache; bit-identical results."""
    meta, counts, locs, marks, smarks, keys = cache
    d = int(fp[P_DIM])
    R = fp[P_R]
    inv_half = 2.0 / R
    for i in range(d):
        bout[i] = fp[P_VEC + i]
    if fp[P_LAM] <= 0:
        return _finish(fp, d, bout, 0.0)
    stale = meta[d] == 0 or keys[0] != key
    for i in range(d):
        if meta[i] != math.floor(x[i] / R):
            stale = True
    if stale:
        cur = np.empty(d, np.int64)
        for i in range(d):
            cur[i] = math.floor(x[i] / R)
        _fill_cache(fp, key, cache, cur)
    sacc = 0.0
    for mask in range(1 << d):
        slot = 0
        mult = 1
        ok = True
        for i in range(d):
            c = math.floor((x[i] - 0.5 * R) / R) + ((mask >> i) & 1)
            if c > math.floor((x[i] + 0.5 * R) / R):
                ok = False
                break
            slot += (c - meta[i] + 1) * mult
            mult *= 3
        if not ok:
            continue
        for j in range(counts[slot]):
            r2 = 0.0
            for i in range(d):
                z = (x[i] - locs[slot, j, i]) * inv_half
                r2 += z * z
            if r2 >= 1.0:
                continue
            w = (1.0 - r2) ** 3
            for i in range(d):
                bout[i] += w * marks[slot, j, i]
            sacc += w * smarks[slot, j]
    return _finish(fp, d, bout, sacc)


@njit(cache=True)
def cell_points(fp, key, cell):
    """Points of one lattice cell: (locations (n,d), marks (n,d), sigma marks (n,))."""
    d = int(fp[P_DIM])
    R = fp[P_R]
    ck = key
    for i in range(d):
        ck = derive(ck, np.int64(cell[i]))
    mu = fp[P_LAM] * R**d
    n = _poisson(uniform(ck, 0), mu) if mu > 0 else 0
    locs = np.empty((n, d))
    marks = np.empty((n, d))
    smarks = np.empty(n)
    lk = derive(ck, 1)
    mk = derive(ck, 2)
    kind = int(fp[P_KIND])
    for j in range(n):
        for i in range(d):
            locs[j, i] = (cell[i] + uniform(lk, j * d + i)) * R
            marks[j, i] = _mark(fp, kind, d, ck, mk, j, i)
        smarks[j] = fp[P_SAMP] * (2.0 * uniform(derive(ck, 4), j) - 1.0)
    return locs, marks, smarks


@njit(cache=True)
def drift_many(points, fp, key):
    n, d = points.shape
    out = np.empty((n, d))
    svals = np.empty(n)
    b = np.empty(d)
    for k in range(n):
        svals[k] = eval_env(points[k], fp, key, b)
        out[k] = b
    return out, svals


@njit(cache=True)
def drift_at_origin_ensemble(fp, seed, env_indices, lvec):
    d = int(fp[P_DIM])
    x = np.zeros(d)
    b = np.empty(d)
    out = np.empty(env_indices.shape[0])
    for k in range(env_indices.shape[0]):
        eval_env(x, fp, env_key(seed, env_indices[k]), b)
        acc = 0.0
        for i in range(d):
            acc += b[i] * lvec[i]
        out[k] = acc
    return out


# --------------------------------------------------------------------------
# Python surface


class Environment:
    """One realization w of the environment, selected by ``env_index``."""

    def __init__(self, spec: EnvironmentSpec, env_index: int = 0):
        self.spec = spec
        self.env_index = int(env_index)
        self._fp = spec.params()
        self._key = np.uint64(env_key(spec.seed, self.env_index))

    @property
    def key(self):
        return self._key

    @property
    def fp(self):
        return self._fp

    def drift(self, x: Sequence[float]) -> np.ndarray:
        b = np.empty(self.spec.dimension)
        eval_env(np.asarray(x, dtype=float), self._fp, self._key, b)
        return b

    def sigma_scale(self, x) -> float:
        b = np.empty(self.spec.dimension)
        return eval_env(np.asarray(x, dtype=float), self._fp, self._key, b)

    def sigma(self, x) -> np.ndarray:
        return self.sigma_scale(x) * np.eye(self.spec.dimension)

    def drift_many(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        return drift_many(pts, self._fp, self._key)[0]

    def sigma_scale_many(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        return drift_many(pts, self._fp, self._key)[1]

    def cell_points(self, cell):
        return cell_points(self._fp, self._key, np.asarray(cell, dtype=np.int64))


def bump(u2):
    """phi as a function of |u|^2 (vectorized)."""
    u2 = np.asarray(u2, dtype=float)
    return np.where(u2 < 1.0, (1.0 - np.minimum(u2, 1.0)) ** 3, 0.0)


@dataclass
class SignSplit:
    mean_plus: float
    se_plus: float
    mean_minus: float
    se_minus: float
    n_env: int


def sign_split_moments(spec: EnvironmentSpec, l, n_env: int, first_env: int = 0) -> SignSplit:
    """Ensemble estimates of E[(b(0,w).l)_+] and E[(b(0,w).l)_-]."""
    lvec = np.asarray(l, dtype=float)
    if abs(np.linalg.norm(lvec) - 1.0) > 1e-12:
        raise ValueError("direction l must be a unit vector")
    if n_env < 2:
        raise ValueError("n_env must be >= 2")
    idx = np.arange(first_env, first_env + n_env, dtype=np.int64)
    proj = drift_at_origin_ensemble(spec.params(), spec.seed, idx, lvec)
    pos, neg = np.maximum(proj, 0.0), np.maximum(-proj, 0.0)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(len(v)))  # noqa: E731
    return SignSplit(float(pos.mean()), se(pos), float(neg.mean()), se(neg), n_env)


def with_base_scale(spec: EnvironmentSpec, factor: float) -> EnvironmentSpec:
    """Spec with only the base drift rescaled (marks unchanged)."""
    return _replace(spec, base_drift=tuple(factor * a for a in spec.base_drift))
