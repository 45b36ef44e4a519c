"""Slab exit probabilities, stretched-exponential decay fits and ballistic statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import optimize
from scipy.stats import norm

from . import farm
from .env import EnvironmentSpec
from .regen import BlockTable
from .rng import TAG_NOISE, derive, env_key, trajectory_key
from .sde import IntegratorConfig, Region, em_step, sample_exits
from .stats import InsufficientDataError, Z95, clopper_pearson_upper, mean_se, wilson_interval

GAMMA_LADDER = (0.4, 0.6, 0.8, 1.0)
CENSOR_WARN = 0.05
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class SlabSpec:
    """The slab {x : -depth_ratio * L < x.l < L}."""

    l: tuple
    depth_ratio: float
    L: float

    def __post_init__(self):
        if self.depth_ratio <= 0 or self.L <= 0:
            raise ValueError("depth_ratio and L must be > 0")

    def region(self) -> Region:
        return Region.slab_ulbl(self.l, self.depth_ratio, self.L)


@dataclass
class SlabExitEstimate:
    slab: SlabSpec
    n: int
    exit_left_count: int
    exit_right_count: int
    censored_count: int
    p_hat: float
    ci_low: float
    ci_high: float
    censored_warning: bool = False

    @property
    def se(self) -> float:
        return math.sqrt(self.p_hat * (1 - self.p_hat) / self.n)

    @property
    def upper_interval(self) -> tuple[float, float]:
        """[p_hat, p_hat + censored fraction]: the range of left exits if censored paths all exited left."""
        return self.p_hat, self.p_hat + self.censored_count / self.n

    def row(self, gamma=None) -> dict:
        return dict(L=self.slab.L, gamma=gamma, depth_ratio=self.slab.depth_ratio, n=self.n,
                    exit_left=self.exit_left_count, exit_right=self.exit_right_count, p_hat=self.p_hat,
                    ci_low=self.ci_low, ci_high=self.ci_high, censored=self.censored_count)


def slab_exit_probability(
    spec: EnvironmentSpec, slab: SlabSpec, n: int, integ: IntegratorConfig = IntegratorConfig(), first_traj: int = 0
) -> SlabExitEstimate:
    """Annealed P_0[X exits the slab through its left wall] with a Wilson 95% interval."""
    if n < 100:
        raise ValueError("n must be >= 100")
    ex = sample_exits(spec, slab.region(), n, integ, annealed=True, first_traj=first_traj)
    left = int(np.sum((ex.status == 1) & (ex.sides == -1)))
    right = int(np.sum((ex.status == 1) & (ex.sides == 1)))
    cens = ex.n_censored
    lo, hi = wilson_interval(left, n)
    return SlabExitEstimate(slab, n, left, right, cens, left / n, lo, hi, cens > CENSOR_WARN * n)


def slab_ladder(spec, l, depth_ratio, L_ladder, n, integ=IntegratorConfig(), first_traj=0):
    return [slab_exit_probability(spec, SlabSpec(tuple(l), depth_ratio, L), n, integ, first_traj) for L in L_ladder]


# --------------------------------------------------------------------------
# decay fits


@dataclass(frozen=True)
class LadderPoint:
    """One cell of a ladder: count of left exits out of n (n=None: exact p)."""

    L: float
    p: float
    n: int | None = None
    count: int | None = None

    @classmethod
    def of(cls, est: SlabExitEstimate) -> "LadderPoint":
        return cls(est.slab.L, est.p_hat, est.n, est.exit_left_count)


@dataclass
class TFit:
    gamma: float
    slope: float | None
    stderr: float | None
    intercept: float | None
    verdict: str
    n_censored_cells: int = 0

    @property
    def consistent(self) -> bool:
        return self.verdict.startswith("consistent")

    @property
    def slope_upper(self) -> float | None:
        return None if self.slope is None else self.slope + Z95 * self.stderr


def _num_hessian(f, x, eps=1e-4):
    k = len(x)
    H = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            ei = np.eye(k)[i] * eps
            ej = np.eye(k)[j] * eps
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * eps * eps)
    return H


def fit_condition_T(points, gamma: float) -> TFit:
    """Fit log p_L = a + slope * L^gamma over a ladder.

    Cells with counts get a normal likelihood on log p_hat with delta-method
    scale sqrt((1-p)/(n p)).  Zero-count cells enter as censored
    observations: log p <= log of the one-sided 95% Clopper-Pearson upper
    bound.  The verdict is "consistent" iff slope + 1.96 SE < 0.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    pts = [p if isinstance(p, LadderPoint) else LadderPoint.of(p) for p in points]
    if len(pts) < 3:
        raise InsufficientDataError("need at least 3 ladder points")
    x = np.array([p.L**gamma for p in pts])
    exact = all(p.n is None for p in pts)
    if exact:
        y = np.log([p.p for p in pts])
        A = np.c_[np.ones_like(x), x]
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        dof = max(len(y) - 2, 1)
        s2 = float(resid @ resid) / dof
        cov = s2 * np.linalg.inv(A.T @ A)
        slope, se = float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0)))
        return TFit(gamma, slope, se, float(coef[0]), _verdict(slope, se))
    obs, cens = [], []
    for xi, p in zip(x, pts):
        k = p.count if p.count is not None else int(round(p.p * p.n))
        if k > 0:
            ph = k / p.n
            obs.append((xi, math.log(ph), math.sqrt(max(1 - ph, 1e-12) / k)))
        else:
            pu = clopper_pearson_upper(0, p.n)
            cens.append((xi, math.log(pu), math.sqrt((1 - pu) / (p.n * pu))))
    if not obs:
        return TFit(gamma, None, None, None, "consistent, probability below resolution", len(cens))
    obs, cens = np.array(obs), np.array(cens).reshape(-1, 3)

    def nll(theta):
        a, s = theta
        mu = a + s * obs[:, 0]
        out = 0.5 * np.sum(((obs[:, 1] - mu) / obs[:, 2]) ** 2)
        if len(cens):
            mu_c = a + s * cens[:, 0]
            out -= np.sum(norm.logcdf((cens[:, 1] - mu_c) / cens[:, 2]))
        return out

    # start from the unweighted fit of all cells, censored ones at their bound
    allx = np.r_[obs[:, 0], cens[:, 0]]
    ally = np.r_[obs[:, 1], cens[:, 1]]
    if len(np.unique(allx)) < 2:
        raise InsufficientDataError("ladder needs two distinct L values")
    s0, a0 = np.polyfit(allx, ally, 1)
    res = optimize.minimize(nll, np.array([a0, s0]), method="Nelder-Mead",
                            options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000))
    a, s = res.x
    H = _num_hessian(nll, res.x, eps=1e-4 * max(1.0, abs(s)))
    try:
        cov = np.linalg.inv(H)
        se = float(math.sqrt(max(cov[1, 1], 0.0)))
    except np.linalg.LinAlgError:
        se = math.inf
    return TFit(gamma, float(s), se, float(a), _verdict(float(s), se), len(cens))


def _verdict(slope, se):
    if slope + Z95 * se < -ZERO_TOL:
        return "consistent"
    return "not consistent"


def cone_directions(l, half_angle: float, n_dirs: int) -> np.ndarray:
    """Unit vectors around l.

    d = 1: just l.  d = 2: n_dirs directions evenly spread over the closed
    cone [-half_angle, half_angle] (its boundary has only two points).
    d >= 3: n_dirs directions on the cone boundary at evenly spaced azimuths.
    """
    l = np.asarray(l, float)
    d = len(l)
    if d == 1:
        return l[None, :].copy()
    if n_dirs < 3:
        raise ValueError("n_dirs must be >= 3")
    # orthonormal complement of l
    q, _ = np.linalg.qr(np.c_[l, np.eye(d)])
    basis = q[:, 1:d] * np.sign(q[:, :1].T @ l)
    if d == 2:
        angles = np.linspace(-half_angle, half_angle, n_dirs)
        return np.array([math.cos(a) * l + math.sin(a) * basis[:, 0] for a in angles])
    out = []
    for j in range(n_dirs):
        phi = 2 * math.pi * j / n_dirs
        u = math.cos(phi) * basis[:, 0] + math.sin(phi) * basis[:, 1]
        out.append(math.cos(half_angle) * l + math.sin(half_angle) * u)
    return np.array(out)


@dataclass
class NeighborhoodVerdict:
    directions: np.ndarray
    fits: list
    ladders: list

    @property
    def consistent(self) -> bool:
        return all(f.consistent for f in self.fits)


def neighborhood_T(
    spec: EnvironmentSpec,
    l,
    gamma: float,
    cone_half_angle: float,
    n_dirs: int,
    L_ladder=(2, 4, 8),
    n: int = 10000,
    depth_ratio: float = 1.0,
    integ: IntegratorConfig = IntegratorConfig(),
) -> NeighborhoodVerdict:
    """Repeat the (T)_gamma fit for directions around l; overall verdict is the conjunction."""
    dirs = cone_directions(l, cone_half_angle, n_dirs)
    fits, ladders = [], []
    for u in dirs:
        lad = slab_ladder(spec, u, depth_ratio, L_ladder, n, integ)
        ladders.append(lad)
        fits.append(fit_condition_T(lad, gamma))
    return NeighborhoodVerdict(dirs, fits, ladders)


# --------------------------------------------------------------------------
# tau_1 integrability


@dataclass
class IntegrabilityResult:
    gamma: float
    n_records: int
    tail: list
    mu_hat: float
    mu_se: float
    threshold: float
    n_excess: int
    tau1_found_fraction: float
    integrable: bool

    @property
    def verdict(self) -> str:
        return "integrable" if self.integrable else "not integrable"


def tau1_integrability(table: BlockTable, gamma: float, min_records: int = 200, transience_min: float = 0.9,
                       sup=None, found_fraction: float | None = None) -> IntegrabilityResult:
    """Tail of sup_{t <= tau_1} |X_t| and a stretched-exponential rate estimate.

    The rate mu is the exponential MLE for S^gamma over the median
    (peaks over threshold): mu_hat = 1 / mean excess, SE = mu_hat / sqrt(k).
    Integrability needs mu_hat - 1.96 SE > 0 and tau_1 found within the
    horizon on at least ``transience_min`` of the trajectories.  ``sup`` and
    ``found_fraction`` may be given directly for synthetic data.
    """
    if sup is None:
        sel = table.uncensored() & (table.k == 0)
        sup = table.sup[sel]
        found_fraction = float(table.tau1_confirmed().mean()) if table.n_traj else 0.0
    sup = np.asarray(sup, float)
    if found_fraction is None:
        found_fraction = 1.0
    if len(sup) < min_records:
        raise InsufficientDataError(f"{len(sup)} uncensored tau_1 records, need {min_records}")
    srt = np.sort(sup)
    qs = np.quantile(srt, [0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99])
    tail = [dict(s=float(q), survival=float(np.mean(sup > q))) for q in qs]
    z = sup**gamma
    u = float(np.median(z))
    exc = z[z > u] - u
    k = len(exc)
    mu = 1.0 / exc.mean() if k and exc.mean() > 0 else math.inf
    se = mu / math.sqrt(k) if k else math.inf
    ok = (mu - Z95 * se > 0) and found_fraction >= transience_min
    return IntegrabilityResult(gamma, len(sup), tail, float(mu), float(se), u, k, found_fraction, bool(ok))


@dataclass
class EquivalenceCheck:
    t_fit: TFit
    integrability: IntegrabilityResult | None
    refusal: str | None = None

    @property
    def t_verdict(self) -> bool:
        return self.t_fit.consistent and self.t_fit.slope is not None

    @property
    def tau_verdict(self) -> bool:
        return self.integrability is not None and self.integrability.integrable

    @property
    def agree(self) -> bool:
        return self.t_verdict == self.tau_verdict


def equivalence_check(ladder, table: BlockTable, gamma: float = 1.0, **kw) -> EquivalenceCheck:
    """Compare the slab-decay verdict with the tau_1 integrability verdict.

    A refusal for lack of tau_1 records counts as a negative integrability
    verdict.  A ladder with every cell at zero (no slope) counts as positive.
    """
    fit = fit_condition_T(ladder, gamma)
    try:
        integ = tau1_integrability(table, gamma, **kw)
        return EquivalenceCheck(fit, integ)
    except InsufficientDataError as e:
        return EquivalenceCheck(fit, None, str(e))


# --------------------------------------------------------------------------
# velocity, CLT covariance, direction


@njit(cache=True)
def transverse_kernel(fp, seed, env_idx, traj_idx, lvec, h, checkpoints):
    """sup_{t <= T} |Pi X_t| at each checkpoint step, Pi the projection orthogonal to l."""
    n = env_idx.shape[0]
    d = lvec.shape[0]
    out = np.zeros((n, checkpoints.shape[0]))
    b = np.empty(d)
    sqrt_h = math.sqrt(h)
    for k in range(n):
        ekey = env_key(seed, env_idx[k])
        nkey = derive(trajectory_key(seed, env_idx[k], traj_idx[k]), TAG_NOISE)
        x = np.zeros(d)
        xn = np.empty(d)
        best = 0.0
        c = 0
        for m in range(checkpoints[-1]):
            em_step(x, xn, fp, ekey, nkey, m, h, sqrt_h, b, True)
            x, xn = xn, x
            a = 0.0
            for i in range(d):
                a += x[i] * lvec[i]
            r2 = 0.0
            for i in range(d):
                z = x[i] - a * lvec[i]
                r2 += z * z
            if r2 > best:
                best = r2
            while c < checkpoints.shape[0] and checkpoints[c] == m + 1:
                out[k, c] = math.sqrt(best)
                c += 1
    return out


def transverse_profile(spec, l, T_list, n: int, integ: IntegratorConfig = IntegratorConfig(), rhos=(0.6, 0.8, 1.0),
                       first_traj: int = 0):
    """Mean of sup_{t <= T} |Pi X_t| and its ratio to T^rho for each T."""
    T_list = sorted(T_list)
    cps = np.array([int(round(T * integ.steps_per_unit)) for T in T_list], np.int64)
    fp, seed = spec.params(), spec.seed
    idx = np.arange(first_traj, first_traj + n, dtype=np.int64)
    lv = np.asarray(l, float)

    def work(a, b):
        return transverse_kernel(fp, seed, idx[a:b], idx[a:b], lv, integ.h, cps)

    sups = np.concatenate(farm.map_chunks(work, n, size=64))
    rows = []
    for j, T in enumerate(T_list):
        m, se = mean_se(sups[:, j])
        rows.append(dict(T=T, mean_sup=m, se=se, **{f"ratio_rho_{r}": m / T**r for r in rhos}))
    return rows


@dataclass
class BallisticReport:
    v_hat_direction: np.ndarray
    velocity: np.ndarray
    velocity_se: np.ndarray
    covariance: np.ndarray
    direct_velocity: np.ndarray
    direct_velocity_se: np.ndarray
    velocity_z: float
    inconsistent: bool
    v_l_lower95: float
    renewal_identity_velocity: float | None
    v_hat_halves: tuple
    tau1_tail: list
    gamma_fit: list = field(default_factory=list)
    transverse: list = field(default_factory=list)
    n_blocks: int = 0
    n_traj: int = 0

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            return v

        return {k: conv(v) for k, v in self.__dict__.items()}


def block_velocity(table: BlockTable, k_min: int = 1, k_max: int | None = None):
    """Ratio estimator (sum of increments / sum of durations) with delta-method SE."""
    sel = table.uncensored(k_min)
    if k_max is not None:
        sel &= table.k <= k_max
    inc, dur = table.inc[sel], table.dur[sel]
    n = len(dur)
    v = inc.sum(0) / dur.sum()
    resid = inc - np.outer(dur, v)
    cov = np.atleast_2d(np.cov(resid.T, ddof=1)) / dur.mean()
    se = np.sqrt(np.diag(cov) / (n * dur.mean()))
    return v, se, cov, n


def ballistic_statistics(table: BlockTable, min_blocks: int = 200, min_traj: int = 50, gamma_fits=(),
                         transverse=()) -> BallisticReport:
    """Velocity, direction and CLT covariance from renewal blocks.

    The direct estimator is the mean of X_T / T over the scanned trajectories.
    The two velocity estimates are flagged inconsistent when they differ by
    more than 5 combined standard errors in any coordinate.
    """
    sel = table.uncensored(1)
    if sel.sum() < min_blocks:
        raise InsufficientDataError(f"{int(sel.sum())} uncensored blocks, need {min_blocks}")
    if table.n_traj < min_traj:
        raise InsufficientDataError(f"{table.n_traj} trajectories, need {min_traj}")
    l = table.l
    v, se, cov, n = block_velocity(table)
    direct = table.endpoint / table.t_end[:, None]
    dv = direct.mean(0)
    dse = direct.std(0, ddof=1) / math.sqrt(len(direct))
    z = float(np.max(np.abs(v - dv) / np.sqrt(se**2 + dse**2)))
    mean_inc = table.inc[sel].mean(0)
    vhat = mean_inc / np.linalg.norm(mean_inc)
    vl = float(v @ l)
    vl_se = float(math.sqrt(l @ cov @ l / (n * table.dur[sel].mean())))
    kk = table.k[sel]
    half = int(np.median(kk))
    halves = []
    for lo, hi in ((1, half), (half + 1, None)):
        s2 = sel & (table.k >= lo) & ((table.k <= hi) if hi is not None else True)
        if s2.sum() >= 2:
            mi = table.inc[s2].mean(0)
            halves.append((mi / np.linalg.norm(mi)).tolist())
    ren = None
    if table.no_backtrack is not None:
        z0 = table.uncensored() & (table.k == 0) & np.isin(table.traj, table.t_traj[table.no_backtrack])
        if z0.sum() >= 2:
            ren = float((table.inc[z0] @ l).mean() / table.dur[z0].mean())
    tau1 = table.dur[table.uncensored() & (table.k == 0)]
    tail = []
    if len(tau1):
        for u in np.quantile(tau1, [0.5, 0.75, 0.9, 0.95, 0.99]):
            s = float(np.mean(tau1 > u))
            tail.append(dict(u=float(u), survival=s,
                             log_log_u=float(math.log(math.log(u))) if u > math.e else None,
                             neg_log_survival=float(-math.log(s)) if s > 0 else None))
    return BallisticReport(
        vhat, v, se, cov, dv, dse, z, z > 5.0, vl - Z95 * vl_se, ren, tuple(halves), tail,
        list(gamma_fits), list(transverse), n, table.n_traj,
    )
