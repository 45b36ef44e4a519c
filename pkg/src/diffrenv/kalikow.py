"""Green functions of killed diffusions, the auxiliary (Kalikow) drift and condition (K).

The Green function g_U(0, ., omega) is estimated from occupation times:
each path from 0 adds h to the cell holding X_n at every step until it
leaves U.  The auxiliary drift at a cell is the ratio of ensemble means

    b'_U(x) = E[g_U(0, x, omega) b(x, omega)] / E[g_U(0, x, omega)],

with b evaluated at the cell center, so a single environment reproduces
b itself.  Statistics are kept per batch of root paths (contiguous in the
environment-major path order), which gives standard errors and a
bootstrap for the margin infimum.

Cells far upstream are rarely visited by a ballistic path.  Optional
splitting along f(x) = -x.l clones a path into k copies of weight 1/k
whenever its lineage first crosses a new level, which keeps occupation
estimates unbiased while sampling upstream cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage, optimize

from .env import EnvironmentSpec, eval_env, sign_split_moments, with_base_scale
from .rng import TAG_BRIDGE_TEST, TAG_NOISE, derive, env_key, normal, seed_to_u64, stream_key, trajectory_key, uniform
from .sde import BALL, BOX, IntegratorConfig, Region, bridge_crossing, region_inside
from .stats import InsufficientDataError, Z95, energy_distance_test, ks_2samp

N_BATCHES = 32
RELIABLE_REL_SE = 0.5
MARGIN_RANGES = 5.0
AUX_STREAM = 0x41555849  # stream id separating auxiliary-diffusion noise from environment paths


@dataclass
class DomainGrid:
    """Cells of side delta centered on the lattice delta * Z^d, covering a ball or box."""

    region: Region
    delta: float
    lo_idx: np.ndarray
    shape: tuple

    @classmethod
    def of(cls, region: Region, delta: float) -> "DomainGrid":
        data = region.data
        if data[0] == BALL:
            r = data[1]
            c = np.array(data[3:], float)
            lo, hi = c - r, c + r
        elif data[0] == BOX:
            d = (len(data) - 3) // 2
            lo, hi = np.array(data[3 : 3 + d], float), np.array(data[3 + d :], float)
        else:
            raise ValueError("domain must be a ball or a box")
        d = len(lo)
        if not region.contains(np.zeros(d)):
            raise ValueError("0 must lie strictly inside the domain")
        lo_idx = np.floor(lo / delta + 0.5).astype(np.int64)
        hi_idx = np.ceil(hi / delta - 0.5).astype(np.int64)
        return cls(region, float(delta), lo_idx, tuple(int(v) for v in hi_idx - lo_idx + 1))

    @classmethod
    def ball(cls, radius, delta, d=2, center=None):
        c = np.zeros(d) if center is None else np.asarray(center, float)
        return cls.of(Region.ball(c, radius), delta)

    @classmethod
    def box(cls, lo, hi, delta):
        return cls.of(Region.box(lo, hi), delta)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.delta**self.d

    def centers(self) -> np.ndarray:
        axes = [(self.lo_idx[i] + np.arange(self.shape[i])) * self.delta for i in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def inside(self) -> np.ndarray:
        reg = self.region.array()
        return np.array([region_inside(reg, c) for c in self.centers()])

    def dist_to_boundary(self, pts=None) -> np.ndarray:
        pts = self.centers() if pts is None else np.atleast_2d(pts)
        data = self.region.data
        if data[0] == BALL:
            c = np.array(data[3:], float)
            return data[1] - np.linalg.norm(pts - c, axis=1)
        d = self.d
        lo, hi = np.array(data[3 : 3 + d]), np.array(data[3 + d :])
        return np.minimum(pts - lo, hi - pts).min(axis=1)

    def margin(self, R: float) -> np.ndarray:
        """Cells whose center is farther than 5R from the boundary."""
        return self.dist_to_boundary() > MARGIN_RANGES * R

    def cell_of(self, x) -> int:
        idx = np.floor(np.asarray(x, float) / self.delta + 0.5).astype(np.int64) - self.lo_idx
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            return -1
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def describe(self) -> str:
        data = self.region.data
        if data[0] == BALL:
            return f"ball(r={data[1]:g})"
        d = self.d
        return "box(" + ",".join(f"{a:g}..{b:g}" for a, b in zip(data[3 : 3 + d], data[3 + d :])) + ")"


def domain_family(scales, R: float, d: int, delta: float, kinds=("ball", "box")) -> list:
    """Balls of diameter s*R and cubes of side s*R centered at 0, for each scale s."""
    out = []
    for s in scales:
        half = 0.5 * s * R
        for k in kinds:
            if k == "ball":
                out.append(DomainGrid.ball(half, delta, d))
            else:
                out.append(DomainGrid.box(-half * np.ones(d), half * np.ones(d), delta))
    return out


# --------------------------------------------------------------------------
# occupation kernel


@njit(cache=True, inline="always")
def _flat_index(x, lo_idx, shape, delta):
    d = x.shape[0]
    flat = 0
    for i in range(d):
        k = int(math.floor(x[i] / delta + 0.5)) - lo_idx[i]
        if k < 0 or k >= shape[i]:
            return -1
        flat = flat * shape[i] + k
    return flat


@njit(cache=True)
def _center_of(flat, lo_idx, shape, delta, out):
    d = out.shape[0]
    for i in range(d - 1, -1, -1):
        k = flat % shape[i]
        flat //= shape[i]
        out[i] = (lo_idx[i] + k) * delta


@njit(cache=True)
def green_batch_kernel(fp, seed, p_start, p_stop, n_traj, x0, reg, lo_idx, shape, delta, h, max_steps, bridge,
                       lvec, split_spacing, split_factor, split_lateral, max_clones, G, GB, stats):
    """Occupation sums for root paths p_start..p_stop (env = p // n_traj).

    G[c] += weighted time in cell c, GB[c] += that time * b(center_c, omega).
    stats: [sum T, sum T^2, censored weight, roots, clones, clone-cap hits].
    """
    d = x0.shape[0]
    ncell = G.shape[0]
    occ = np.zeros(ncell)
    touched = np.empty(ncell, np.int64)
    nt = 0
    b = np.empty(d)
    cen = np.empty(d)
    sqrt_h = math.sqrt(h)
    cap = max_clones
    sx = np.empty((cap, d))
    sn = np.empty(cap, np.int64)
    skey = np.empty(cap, np.uint64)
    sw = np.empty(cap)
    slev = np.empty(cap, np.int64)
    x = np.empty(d)
    xn = np.empty(d)
    cur_env = -1
    ekey = np.uint64(0)
    for p in range(p_start, p_stop + 1):
        env = p // n_traj if p < p_stop else -1
        if env != cur_env:
            if cur_env >= 0:
                for j in range(nt):
                    c = touched[j]
                    _center_of(c, lo_idx, shape, delta, cen)
                    eval_env(cen, fp, ekey, b)
                    G[c] += occ[c]
                    for i in range(d):
                        GB[c, i] += occ[c] * b[i]
                    occ[c] = 0.0
                nt = 0
            cur_env = env
            if env < 0:
                break
            ekey = env_key(seed, env)
        traj = p % n_traj
        top = 1
        sx[0] = x0
        sn[0] = 0
        skey[0] = trajectory_key(seed, env, traj)
        sw[0] = 1.0
        slev[0] = 0
        root_T = 0.0
        while top > 0:
            top -= 1
            for i in range(d):
                x[i] = sx[top, i]
            n = sn[top]
            key = skey[top]
            w = sw[top]
            lev = slev[top]
            nkey = derive(key, TAG_NOISE)
            bkey = derive(key, TAG_BRIDGE_TEST)
            stats[4] += 1.0
            c0 = 0
            done = False
            while not done:
                if n >= max_steps:
                    stats[2] += w
                    break
                cell = _flat_index(x, lo_idx, shape, delta)
                if cell >= 0:
                    if occ[cell] == 0.0:
                        touched[nt] = cell
                        nt += 1
                    occ[cell] += w * h
                s = eval_env(x, fp, ekey, b)
                for i in range(d):
                    xn[i] = x[i] + b[i] * h + s * sqrt_h * normal(nkey, c0 * d + i)
                n += 1
                c0 += 1
                if not region_inside(reg, xn):
                    done = True
                elif bridge and bridge_crossing(reg, x, xn, s * s * h, uniform(bkey, c0)) != 0:
                    done = True
                for i in range(d):
                    x[i] = xn[i]
                if done:
                    root_T += w * n * h
                    break
                if split_factor > 1:
                    a = 0.0
                    for i in range(d):
                        a -= x[i] * lvec[i]
                    if split_lateral > 0.0:
                        t2 = 0.0
                        for i in range(d):
                            z = x[i] + a * lvec[i]
                            t2 += z * z
                        a += split_lateral * math.sqrt(t2)
                    newlev = int(math.floor(a / split_spacing))
                    while newlev > lev:
                        lev += 1
                        wc = w / split_factor
                        w = wc
                        for k in range(1, split_factor):
                            if top >= cap:
                                # no room: the copy's mass stays on this path
                                stats[5] += 1.0
                                w += wc
                                continue
                            sx[top] = x
                            sn[top] = n
                            skey[top] = derive(derive(key, c0 + 1000003 * lev), k)
                            sw[top] = wc
                            slev[top] = lev
                            top += 1
        stats[0] += root_T
        stats[1] += root_T * root_T
        stats[3] += 1.0
    return nt


@dataclass
class GreenEstimate:
    """Per-batch occupation sums and the derived Green density.

    g_batch[j, c]: total time in cell c over the root paths of batch j;
    gb_batch[j, c]: the same weighted by b(center_c, omega).
    """

    grid: DomainGrid
    g_batch: np.ndarray
    gb_batch: np.ndarray
    paths_per_batch: np.ndarray
    n_env: int
    n_traj: int
    exit_T_sum: float
    exit_T_sumsq: float
    censored_weight: float
    clone_cap_hits: int = 0
    n_clones: int = 0

    @property
    def n_paths(self) -> int:
        return int(self.paths_per_batch.sum())

    @property
    def flagged(self) -> bool:
        """Green mass missing because some path hit the time horizon."""
        return self.censored_weight > 0

    @property
    def g_mean(self) -> np.ndarray:
        return self.g_batch.sum(0) / (self.n_paths * self.grid.cell_volume)

    @property
    def g_se(self) -> np.ndarray:
        nb = len(self.paths_per_batch)
        if nb < 2:
            return np.full(self.grid.n_cells, np.nan)
        per = self.g_batch / (self.paths_per_batch[:, None] * self.grid.cell_volume)
        wts = self.paths_per_batch / self.paths_per_batch.sum()
        mean = wts @ per
        var = (wts[:, None] * (per - mean) ** 2).sum(0) * nb / (nb - 1)
        return np.sqrt(var / nb)

    @property
    def mean_exit_time(self) -> float:
        return self.exit_T_sum / self.n_paths

    @property
    def mean_exit_time_se(self) -> float:
        n = self.n_paths
        m = self.exit_T_sum / n
        var = max(self.exit_T_sumsq / n - m * m, 0.0) * n / max(n - 1, 1)
        return math.sqrt(var / n)

    @property
    def total_occupation(self) -> float:
        """Sum of g * cell volume: equals the mean exit time."""
        return float(self.g_mean.sum() * self.grid.cell_volume)

    def value_at(self, x) -> float:
        c = self.grid.cell_of(x)
        return float(self.g_mean[c]) if c >= 0 else 0.0

    def se_at(self, x) -> float:
        c = self.grid.cell_of(x)
        return float(self.g_se[c]) if c >= 0 else 0.0


def estimate_green(
    spec: EnvironmentSpec,
    grid: DomainGrid,
    n_env: int,
    n_traj: int = 1,
    integ: IntegratorConfig = IntegratorConfig(h=0.05, max_time=1e4),
    x0=None,
    l=None,
    split_spacing: float = 1.0,
    split_factor: int = 1,
    split_lateral: float = 0.0,
    n_batches: int = N_BATCHES,
    max_clones: int = 200000,
) -> GreenEstimate:
    """Occupation-time Green estimate over n_env environments, n_traj quenched paths each.

    Batches are contiguous ranges of the environment-major path list; with
    ``split_factor`` > 1 paths are cloned every ``split_spacing`` upstream
    along l; the splitting coordinate is -x.l + split_lateral * |Pi x|, Pi
    the projection orthogonal to l.
    """
    d = spec.dimension
    if grid.d != d:
        raise ValueError("grid dimension differs from the environment's")
    if grid.delta > spec.range / 4 + 1e-12:
        raise ValueError("cell size must be <= R/4")
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, float)
    lv = np.zeros(d) if l is None else np.asarray(l, float)
    if split_factor > 1 and l is None:
        raise ValueError("splitting needs a direction l")
    P = n_env * n_traj
    nb = max(1, min(n_batches, P))
    bounds = [(j * P) // nb for j in range(nb + 1)]
    fp, seed, reg = spec.params(), spec.seed, grid.region.array()
    shape = np.array(grid.shape, np.int64)
    ncell = grid.n_cells

    def work(j):
        G = np.zeros(ncell)
        GB = np.zeros((ncell, d))
        st = np.zeros(6)
        green_batch_kernel(fp, seed, bounds[j], bounds[j + 1], n_traj, x0, reg, grid.lo_idx, shape, grid.delta,
                           integ.h, integ.max_steps, integ.bridge, lv, split_spacing, int(split_factor), split_lateral,
                           max_clones,
                           G, GB, st)
        return G, GB, st

    from . import farm

    parts = farm.map_chunks(lambda a, b: [work(j) for j in range(a, b)], nb, size=1)
    parts = [p for chunk in parts for p in chunk]
    G = np.stack([p[0] for p in parts])
    GB = np.stack([p[1] for p in parts])
    st = np.sum([p[2] for p in parts], axis=0)
    ppb = np.diff(np.array(bounds)).astype(float)
    return GreenEstimate(grid, G, GB, ppb, n_env, n_traj, float(st[0]), float(st[1]), float(st[2]),
                         int(st[5]), int(st[4]))


def green_envelope(green: GreenEstimate, exclude_radius: float | None = None):
    """Check the Green upper-bound shape alpha * h_0 + c on independent halves.

    An envelope alpha * h_0 + c >= g (alpha, c >= 0, minimal total excess) is
    fitted by linear programming to the even batches, then the odd batches'
    estimate is compared against it.  h_0(z) = log(diam U / |z|) for d = 2
    and |z|^{2-d} for d >= 3.  Returns (alpha, c, n_violations, n_cells).
    """
    grid = green.grid
    d = grid.d
    if d < 2:
        raise ValueError("shape check needs d >= 2")
    cen = grid.centers()
    r = np.linalg.norm(cen, axis=1)
    ex = grid.delta if exclude_radius is None else exclude_radius
    use = grid.inside() & (r > ex)
    diam = 2 * (grid.region.data[1] if grid.region.data[0] == BALL else np.max(np.abs(cen)) * math.sqrt(d))
    h0 = np.log(diam / r[use]) if d == 2 else r[use] ** (2 - d)
    vol = grid.cell_volume
    ev, od = green.g_batch[0::2], green.g_batch[1::2]
    pe, po = green.paths_per_batch[0::2].sum(), green.paths_per_batch[1::2].sum()
    ga = ev.sum(0)[use] / (pe * vol)
    gb = od.sum(0)[use] / (po * vol)
    nb = len(od)
    per = od[:, use] / (green.paths_per_batch[1::2, None] * vol)
    se_b = per.std(0, ddof=1) / math.sqrt(nb) if nb > 1 else np.zeros_like(gb)
    # minimize sum(alpha h0 + c - ga) s.t. alpha h0 + c >= ga
    res = optimize.linprog(
        c=[h0.sum(), len(h0)], A_ub=-np.c_[h0, np.ones_like(h0)], b_ub=-ga, bounds=[(0, None), (0, None)],
        method="highs",
    )
    alpha, cc = res.x
    env = alpha * h0 + cc
    viol = int(np.sum(gb > env + 3 * se_b + 1e-15))
    return float(alpha), float(cc), viol, int(use.sum())


# --------------------------------------------------------------------------
# auxiliary drift and condition (K)


@dataclass
class AuxiliaryDriftField:
    """b'_U on the grid cells, with reliability and margin masks.

    Cells are reliable when inside U, visited, and the Green estimate's SE
    is at most half its mean (any visited cell when only one batch exists).
    """

    grid: DomainGrid
    bprime: np.ndarray
    reliable: np.ndarray
    margin: np.ndarray
    g_batch: np.ndarray | None = None
    gb_batch: np.ndarray | None = None
    b_bar: float = math.inf

    @classmethod
    def constant(cls, grid: DomainGrid, vec, R: float) -> "AuxiliaryDriftField":
        n = grid.n_cells
        inside = grid.inside()
        bp = np.tile(np.asarray(vec, float), (n, 1))
        return cls(grid, bp, inside.copy(), inside & grid.margin(R))

    def epsilon_hat(self, l) -> float:
        """Infimum of b'.l over reliable margin cells (+inf when there are none)."""
        m = self.margin & self.reliable
        if not m.any():
            return math.inf
        return float(np.min(self.bprime[m] @ np.asarray(l, float)))

    def at(self, x) -> np.ndarray:
        """Cell value at x; b'(0) = 0 by convention."""
        x = np.asarray(x, float)
        if not np.any(x):
            return np.zeros_like(x)
        c = self.grid.cell_of(x)
        return self.bprime[c].copy() if c >= 0 else np.full(len(x), np.nan)

    def filled(self) -> np.ndarray:
        """Field on the full grid with unreliable cells copied from the nearest reliable cell."""
        if not self.reliable.any():
            raise InsufficientDataError("no reliable cells")
        shape = self.grid.shape
        bad = ~self.reliable.reshape(shape)
        _, idx = ndimage.distance_transform_edt(bad, return_indices=True)
        flat = np.ravel_multi_index(tuple(idx), shape).ravel()
        return self.bprime[flat]

    def rows(self, R: float):
        cen = self.grid.centers()
        for c in range(self.grid.n_cells):
            yield dict(**{f"x{i}": float(cen[c, i]) for i in range(self.grid.d)},
                       **{f"b{i}": float(self.bprime[c, i]) for i in range(self.grid.d)},
                       reliable=bool(self.reliable[c]), margin=bool(self.margin[c]))


def auxiliary_drift(spec: EnvironmentSpec, green: GreenEstimate, allow_single_env: bool = False) -> AuxiliaryDriftField:
    """b'_U = E[g b] / E[g] per cell; see ``AuxiliaryDriftField`` for reliability."""
    if green.n_env < 2 and not allow_single_env:
        raise ValueError("auxiliary drift needs at least 2 environments (allow_single_env for the degenerate case)")
    G = green.g_batch.sum(0)
    GB = green.gb_batch.sum(0)
    grid = green.grid
    inside = grid.inside()
    with np.errstate(invalid="ignore", divide="ignore"):
        bp = np.where(G[:, None] > 0, GB / G[:, None], 0.0)
    mean, se = green.g_mean, green.g_se
    if len(green.paths_per_batch) < 2:
        ok = G > 0
    else:
        ok = (G > 0) & (se <= RELIABLE_REL_SE * mean)
    reliable = inside & ok
    if not reliable.any():
        raise InsufficientDataError("no reliable cells: increase n_env")
    return AuxiliaryDriftField(grid, bp, reliable, inside & grid.margin(spec.range), green.g_batch, green.gb_batch,
                               spec.drift_bound)


@dataclass
class DomainK:
    domain: str
    n_margin: int
    n_unreliable: int
    epsilon_hat: float
    lower_bound: float
    verdict: str


@dataclass
class KReport:
    domains: list
    epsilon_hat: float
    lower_bound: float
    verdict: str

    @property
    def holds(self) -> bool:
        return self.verdict == "holds"


def _bootstrap_eps(fld: AuxiliaryDriftField, l, n_boot, rng):
    m = fld.margin & fld.reliable
    nb = fld.g_batch.shape[0]
    G = fld.g_batch[:, m]
    GB = fld.gb_batch[:, m, :] @ l
    out = np.empty(n_boot)
    for k in range(n_boot):
        idx = rng.integers(0, nb, nb)
        g = G[idx].sum(0)
        gb = GB[idx].sum(0)
        ok = g > 0
        out[k] = np.min(gb[ok] / g[ok]) if ok.any() else -math.inf
    return out


def check_condition_K(fields, l, n_boot: int = 400, seed: int = 0, conf: float = 0.95) -> KReport:
    """epsilon_hat = min over domains of inf over margin cells of b'.l.

    Verdicts: "vacuous" when every margin is empty (inf of the empty set is
    +inf), "inconclusive" when a margin holds an unreliable cell, "holds"
    when epsilon_hat > 0 and its bootstrap lower bound (over batches) > 0,
    otherwise "fails".
    """
    if isinstance(fields, AuxiliaryDriftField):
        fields = [fields]
    l = np.asarray(l, float)
    rng = np.random.default_rng(seed)
    rows = []
    for f in fields:
        m = f.margin
        nm = int(m.sum())
        if nm == 0:
            rows.append(DomainK(f.grid.describe(), 0, 0, math.inf, math.inf, "vacuous"))
            continue
        nu = int(np.sum(m & ~f.reliable))
        eps = f.epsilon_hat(l)
        if f.g_batch is not None and f.g_batch.shape[0] >= 2:
            lb = float(np.quantile(_bootstrap_eps(f, l, n_boot, rng), 1 - conf))
        else:
            lb = eps
        if nu:
            v = "inconclusive"
        elif eps > 0 and lb > 0:
            v = "holds"
        else:
            v = "fails"
        rows.append(DomainK(f.grid.describe(), nm, nu, eps, lb, v))
    live = [r for r in rows if r.verdict != "vacuous"]
    if not live:
        return KReport(rows, math.inf, math.inf, "vacuous")
    eps = min(r.epsilon_hat for r in live)
    lb = min(r.lower_bound for r in live)
    if any(r.verdict == "fails" for r in live):
        v = "fails"
    elif any(r.verdict == "inconclusive" for r in live):
        v = "inconclusive"
    else:
        v = "holds"
    return KReport(rows, eps, lb, v)


# --------------------------------------------------------------------------
# auxiliary diffusion and the exit-law identity


@njit(cache=True)
def _interp(field, lo_idx, shape, delta, x, out):
    """Multilinear interpolation of a cell-centered field; clamps at the grid edge."""
    d = x.shape[0]
    base = np.empty(d, np.int64)
    frac = np.empty(d)
    for i in range(d):
        u = x[i] / delta - lo_idx[i]
        if u < 0.0:
            u = 0.0
        if u > shape[i] - 1:
            u = shape[i] - 1.0
        k = int(math.floor(u))
        if k >= shape[i] - 1:
            k = max(shape[i] - 2, 0)
        base[i] = k
        frac[i] = u - k
    for i in range(d):
        out[i] = 0.0
    for corner in range(1 << d):
        w = 1.0
        flat = 0
        for i in range(d):
            bit = (corner >> i) & 1
            k = base[i] + bit
            if k >= shape[i]:
                k = shape[i] - 1
            w *= frac[i] if bit else 1.0 - frac[i]
            flat = flat * shape[i] + k
        if w != 0.0:
            for i in range(d):
                out[i] += w * field[flat, i]


@njit(cache=True)
def aux_exit_kernel(field, lo_idx, shape, delta, key0, idx, x0, reg, h, max_steps, bridge):
    n = idx.shape[0]
    d = x0.shape[0]
    pos = np.empty((n, d))
    status = np.zeros(n, np.int64)
    steps = np.zeros(n, np.int64)
    b = np.empty(d)
    x = np.empty(d)
    xn = np.empty(d)
    sqrt_h = math.sqrt(h)
    for k in range(n):
        key = derive(key0, idx[k])
        nkey = derive(key, TAG_NOISE)
        bkey = derive(key, TAG_BRIDGE_TEST)
        x[:] = x0
        for m in range(max_steps):
            zero = True
            for i in range(d):
                if x[i] != 0.0:
                    zero = False
            if zero:
                for i in range(d):
                    b[i] = 0.0
            else:
                _interp(field, lo_idx, shape, delta, x, b)
            for i in range(d):
                xn[i] = x[i] + b[i] * h + sqrt_h * normal(nkey, m * d + i)
            out = not region_inside(reg, xn)
            if not out and bridge:
                out = bridge_crossing(reg, x, xn, h, uniform(bkey, m)) != 0
            x[:] = xn
            if out:
                status[k] = 1
                steps[k] = m + 1
                break
        pos[k] = x
    return status, steps, pos


def auxiliary_exits(fld: AuxiliaryDriftField, n: int, integ: IntegratorConfig, seed: int, first: int = 0):
    """Exit points of dX = b'_U(X) dt + dW from 0 (multilinear interpolation, filled field)."""
    from . import farm

    grid = fld.grid
    filled = np.ascontiguousarray(fld.filled())
    key0 = np.uint64(stream_key(seed_to_u64(seed), AUX_STREAM, 0, AUX_STREAM))
    idx = np.arange(first, first + n, dtype=np.int64)
    reg = grid.region.array()
    shape = np.array(grid.shape, np.int64)

    def work(a, b):
        return aux_exit_kernel(filled, grid.lo_idx, shape, grid.delta, key0, idx[a:b], np.zeros(grid.d), reg, integ.h,
                               integ.max_steps, integ.bridge)

    parts = farm.map_chunks(work, n)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def project_to_boundary(grid: DomainGrid, pts: np.ndarray) -> np.ndarray:
    data = grid.region.data
    pts = np.atleast_2d(np.asarray(pts, float)).copy()
    if data[0] == BALL:
        c = np.array(data[3:], float)
        v = pts - c
        return c + data[1] * v / np.linalg.norm(v, axis=1, keepdims=True)
    d = grid.d
    lo, hi = np.array(data[3 : 3 + d]), np.array(data[3 + d :])
    return np.clip(pts, lo, hi)


@dataclass
class ExitLawReport:
    statistic: float
    p_value: float
    n_a: int
    n_b: int
    censored_a: int
    censored_b: int
    uniformity_p: tuple | None = None
    alpha: float = 0.01

    @property
    def rejected(self) -> bool:
        return self.p_value < self.alpha


def exit_law_identity_test(
    spec: EnvironmentSpec,
    fld: AuxiliaryDriftField,
    n: int,
    integ: IntegratorConfig = IntegratorConfig(h=0.02, max_time=1e4),
    seed: int = 0,
    n_perm: int = 199,
    uniformity: bool = False,
) -> ExitLawReport:
    """Energy-distance test of annealed exits against auxiliary-diffusion exits from U.

    Sample A uses a fresh environment per path (indices offset by the
    repetition seed); sample B uses the auxiliary drift field.  Exit points
    are projected onto the boundary.  Censored paths are excluded and counted.
    """
    from .sde import sample_exits

    grid = fld.grid
    ex = sample_exits(spec, grid.region, n, integ, annealed=True, first_traj=(seed + 1) * 10_000_000)
    st_b, _, pos_b = auxiliary_exits(fld, n, integ, seed)
    a = project_to_boundary(grid, ex.positions[ex.status == 1])
    bb = project_to_boundary(grid, pos_b[st_b == 1])
    stat, p = energy_distance_test(a, bb, n_perm=n_perm, seed=seed)
    uni = None
    if uniformity and grid.d == 2 and grid.region.data[0] == BALL:
        from scipy.stats import kstest

        ang = lambda z: (np.arctan2(z[:, 1], z[:, 0]) + np.pi) / (2 * np.pi)  # noqa: E731
        uni = (float(kstest(ang(a), "uniform").pvalue), float(kstest(ang(bb), "uniform").pvalue))
    return ExitLawReport(stat, p, len(a), len(bb), int(ex.n_censored), int(np.sum(st_b == 0)), uni)


# --------------------------------------------------------------------------
# drift-sign criterion


@dataclass
class CriterionReport:
    mean_plus: float
    mean_minus: float
    se_plus: float
    se_minus: float
    ratio: float
    c_e_hat: float | None
    margin: float | None
    verdict: str
    scan: list = field(default_factory=list)


def criterion_margin(mean_plus: float, mean_minus: float, c_e: float) -> float:
    return mean_plus - c_e * mean_minus


def criterion_check(
    spec: EnvironmentSpec,
    l,
    n_env: int,
    family_fn=None,
    scales=(),
    green_kw=None,
    moment_envs: int = 20000,
) -> CriterionReport:
    """Sign split of b(0).l and an empirical c_e from a base-drift scan.

    For each factor in ``scales`` the base drift is scaled, the ratio
    mean_plus / mean_minus recomputed and condition (K) checked on the
    domains produced by ``family_fn(spec)``.  c_e_hat is, over the domain
    family, the largest of the per-domain smallest ratios at which (K)
    holds for that and every larger scanned ratio.
    """
    l = np.asarray(l, float)
    ss = sign_split_moments(spec, l, moment_envs)
    mp, mm = ss.mean_plus, ss.mean_minus
    if mm == 0:
        return CriterionReport(mp, mm, ss.se_plus, ss.se_minus, math.inf, None, None,
                               "non-nestling regime; criterion vacuously satisfied")
    green_kw = dict(green_kw or {})
    scan = []
    for f in scales:
        sp = with_base_scale(spec, f)
        s2 = sign_split_moments(sp, l, moment_envs)
        ratio = s2.mean_plus / s2.mean_minus if s2.mean_minus > 0 else math.inf
        fields = [auxiliary_drift(sp, estimate_green(sp, g, n_env, l=l, **green_kw)) for g in family_fn(sp)]
        rep = check_condition_K(fields, l)
        scan.append(dict(scale=f, ratio=ratio, verdicts=[r.verdict for r in rep.domains],
                         epsilons=[r.epsilon_hat for r in rep.domains], verdict=rep.verdict))
    c_e = None
    if scan:
        scan_sorted = sorted(scan, key=lambda r: r["ratio"])
        per_domain = []
        for j in range(len(scan_sorted[0]["verdicts"])):
            best = None
            for r in reversed(scan_sorted):
                if r["verdicts"][j] in ("holds", "vacuous"):
                    best = r["ratio"]
                else:
                    break
            per_domain.append(best)
        if all(v is not None for v in per_domain):
            c_e = max(per_domain)
    ratio = mp / mm
    if c_e is None:
        return CriterionReport(mp, mm, ss.se_plus, ss.se_minus, ratio, None, None, "no scanned ratio satisfies (K)", scan)
    marg = criterion_margin(mp, mm, c_e)
    verdict = "criterion satisfied, predicts (T)" if marg > 0 else "criterion not satisfied"
    return CriterionReport(mp, mm, ss.se_plus, ss.se_minus, ratio, c_e, marg, verdict, scan)
