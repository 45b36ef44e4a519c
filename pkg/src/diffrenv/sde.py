"""Euler-Maruyama simulation of the quenched diffusion and its path functionals.

    X_{n+1} = X_n + b(X_n) h + s(X_n) sqrt(h) xi_n

Gaussian increments come from the counter-based stream of the trajectory
(master_seed, env_index, trajectory_index), so a trajectory is a pure
function of its identifiers and the step size.

Regions are encoded as flat float arrays (see ``Region``) so kernels can
test membership without Python objects.  With ``boundary_correction =
"bridge_test"`` each step also performs the Brownian-bridge crossing test
against every flat face (slab walls, box faces, half-space boundaries):
a step from signed distance a > 0 to b > 0 crossed the face with
probability exp(-2ab / (s^2 h)).  Balls use plain grid detection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import farm
from .env import Environment, EnvironmentSpec, eval_env
from .rng import TAG_BRIDGE_TEST, TAG_NOISE, derive, env_key, normal, seed_to_u64, stream_key, trajectory_key, uniform
from .stats import wilson_interval

SLAB, BALL, BOX, ENTER_UP, ENTER_DOWN = 0, 1, 2, 3, 4
REGION_HEAD = 3

EXITED, TIMEOUT = 1, 0


@dataclass(frozen=True)
class IntegratorConfig:
    h: float = 0.01
    boundary_correction: str = "none"
    max_time: float = 1000.0
    noise: bool = True

    def problems(self) -> list[str]:
        out = []
        if not self.h > 0:
            return ["h: must be > 0"]
        m = 1.0 / self.h
        if abs(m - round(m)) > 1e-9 * m:
            out.append(f"h: 1/h must be an integer, got 1/h={m:.10g}")
        if self.h > 0.1:
            out.append("h: must be <= 0.1")
        if self.boundary_correction not in ("none", "bridge_test"):
            out.append("boundary_correction: must be 'none' or 'bridge_test'")
        if not self.max_time > 0:
            out.append("max_time: must be > 0")
        return out

    def check(self) -> "IntegratorConfig":
        from .env import SpecError

        probs = self.problems()
        if probs:
            raise SpecError(probs)
        return self

    @property
    def steps_per_unit(self) -> int:
        return int(round(1.0 / self.h))

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.max_time * self.steps_per_unit - 1e-9))

    @property
    def bridge(self) -> bool:
        return self.boundary_correction == "bridge_test"


# --------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Open region whose exit (or, for half-spaces, entrance) is tracked.

    ``kind`` is one of ``slab`` {lo < x.l < hi}, ``ball`` {|x - c| < r},
    ``box`` {lo < x < hi}, ``enter_up`` (the entrance time T_u^l into
    {x.l >= u}) and ``enter_down`` (entrance into {x.l <= u}).
    """

    kind: str
    data: tuple

    @staticmethod
    def slab(l, lo, hi):
        return Region("slab", (SLAB, float(lo), float(hi), *map(float, l)))

    @staticmethod
    def slab_ulbl(l, depth_ratio, L):
        """The slab U_{l,b,L} = {-bL < x.l < L}."""
        return Region.slab(l, -depth_ratio * L, L)

    @staticmethod
    def ball(center, radius):
        return Region("ball", (BALL, float(radius), 0.0, *map(float, center)))

    @staticmethod
    def box(lo, hi):
        return Region("box", (BOX, 0.0, 0.0, *map(float, lo), *map(float, hi)))

    @staticmethod
    def enter_up(l, u):
        return Region("enter_up", (ENTER_UP, float(u), 0.0, *map(float, l)))

    @staticmethod
    def enter_down(l, u):
        return Region("enter_down", (ENTER_DOWN, float(u), 0.0, *map(float, l)))

    def array(self) -> np.ndarray:
        return np.array(self.data, dtype=float)

    def contains(self, x) -> bool:
        return bool(region_inside(self.array(), np.asarray(x, dtype=float)))


@njit(cache=True, inline="always")
def _dot_tail(reg, x, off):
    acc = 0.0
    for i in range(x.shape[0]):
        acc += reg[off + i] * x[i]
    return acc


@njit(cache=True)
def region_inside(reg, x):
    code = int(reg[0])
    d = x.shape[0]
    if code == SLAB:
        p = _dot_tail(reg, x, REGION_HEAD)
        return reg[1] < p < reg[2]
    if code == BALL:
        r2 = 0.0
        for i in range(d):
            z = x[i] - reg[REGION_HEAD + i]
            r2 += z * z
        return r2 < reg[1] * reg[1]
    if code == BOX:
        for i in range(d):
            if not (reg[REGION_HEAD + i] < x[i] < reg[REGION_HEAD + d + i]):
                return False
        return True
    if code == ENTER_UP:
        return _dot_tail(reg, x, REGION_HEAD) < reg[1]
    return _dot_tail(reg, x, REGION_HEAD) > reg[1]


@njit(cache=True)
def region_side(reg, x):
    """Which boundary a point outside the region lies beyond.

    slab: -1 (x.l <= lo) or +1; box: -(i+1) / +(i+1) for face i;
    half-spaces: +1; ball: +1.
    """
    code = int(reg[0])
    d = x.shape[0]
    if code == SLAB:
        return -1 if _dot_tail(reg, x, REGION_HEAD) <= reg[1] else 1
    if code == BOX:
        for i in range(d):
            if x[i] <= reg[REGION_HEAD + i]:
                return -(i + 1)
            if x[i] >= reg[REGION_HEAD + d + i]:
                return i + 1
    return 1


@njit(cache=True, inline="always")
def _cross(a, b, var):
    if a <= 0.0 or b <= 0.0:
        return 0.0
    return math.exp(-2.0 * a * b / var)


@njit(cache=True)
def bridge_crossing(reg, x0, x1, var, u):
    """Brownian-bridge test for a step x0 -> x1 that stays inside on the grid.

    ``var`` is the one-step variance s^2 h along a face normal.  Faces are
    tested in a fixed order against the single uniform ``u``; returns the
    side code of the crossed face or 0.
    """
    code = int(reg[0])
    d = x0.shape[0]
    if code == BALL:
        return 0
    acc = 0.0
    if code == SLAB:
        p0 = _dot_tail(reg, x0, REGION_HEAD)
        p1 = _dot_tail(reg, x1, REGION_HEAD)
        q = _cross(p0 - reg[1], p1 - reg[1], var)
        acc += q
        if u < acc:
            return -1
        acc += (1.0 - acc) * _cross(reg[2] - p0, reg[2] - p1, var)
        if u < acc:
            return 1
        return 0
    if code == BOX:
        for i in range(d):
            lo = reg[REGION_HEAD + i]
            hi = reg[REGION_HEAD + d + i]
            acc += (1.0 - acc) * _cross(x0[i] - lo, x1[i] - lo, var)
            if u < acc:
                return -(i + 1)
            acc += (1.0 - acc) * _cross(hi - x0[i], hi - x1[i], var)
            if u < acc:
                return i + 1
        return 0
    p0 = _dot_tail(reg, x0, REGION_HEAD)
    p1 = _dot_tail(reg, x1, REGION_HEAD)
    if code == ENTER_UP:
        q = _cross(reg[1] - p0, reg[1] - p1, var)
    else:
        q = _cross(p0 - reg[1], p1 - reg[1], var)
    return 1 if u < q else 0


# --------------------------------------------------------------------------
# stepping kernels


@njit(cache=True, inline="always")
def em_step(x, xn, fp, ekey, nkey, n, h, sqrt_h, b, noise_on):
    """One Euler-Maruyama step from x into xn; returns s(x)."""
    s = eval_env(x, fp, ekey, b)
    d = x.shape[0]
    for i in range(d):
        xi = normal(nkey, n * d + i) if noise_on else 0.0
        xn[i] = x[i] + b[i] * h + s * sqrt_h * xi
    return s


@njit(cache=True)
def run_exit(fp, seed, env_index, traj_index, x0, reg, h, max_steps, bridge, noise_on, xout):
    """Simulate from x0 until the region is left; returns (status, steps, side)."""
    d = x0.shape[0]
    ekey = env_key(seed, env_index)
    tkey = trajectory_key(seed, env_index, traj_index)
    nkey = derive(tkey, TAG_NOISE)
    bkey = derive(tkey, TAG_BRIDGE_TEST)
    x = x0.copy()
    xn = np.empty(d)
    b = np.empty(d)
    sqrt_h = math.sqrt(h)
    if not region_inside(reg, x):
        xout[:] = x
        return EXITED, 0, region_side(reg, x)
    for n in range(max_steps):
        s = em_step(x, xn, fp, ekey, nkey, n, h, sqrt_h, b, noise_on)
        if not region_inside(reg, xn):
            xout[:] = xn
            return EXITED, n + 1, region_side(reg, xn)
        if bridge:
            side = bridge_crossing(reg, x, xn, s * s * h, uniform(bkey, n))
            if side != 0:
                xout[:] = xn
                return EXITED, n + 1, side
        x, xn = xn, x
    xout[:] = x
    return TIMEOUT, max_steps, 0



@njit(cache=True)
def exit_batch(fp, seed, env_idx, traj_idx, x0, reg, h, max_steps, bridge, noise_on):
    n = env_idx.shape[0]
    d = x0.shape[0]
    status = np.empty(n, np.int64)
    steps = np.empty(n, np.int64)
    sides = np.empty(n, np.int64)
    pos = np.empty((n, d))
    xo = np.empty(d)
    for k in range(n):
        st, ns, sd = run_exit(fp, seed, env_idx[k], traj_idx[k], x0, reg, h, max_steps, bridge, noise_on, xo)
        status[k] = st
        steps[k] = ns
        sides[k] = sd
        pos[k] = xo
    return status, steps, sides, pos


@njit(cache=True)
def simulate_path_kernel(fp, seed, env_index, traj_index, x0, h, n_steps, noise_on):
    d = x0.shape[0]
    ekey = env_key(seed, env_index)
    nkey = derive(trajectory_key(seed, env_index, traj_index), TAG_NOISE)
    pos = np.empty((n_steps + 1, d))
    svals = np.empty(n_steps)
    pos[0] = x0
    b = np.empty(d)
    xn = np.empty(d)
    sqrt_h = math.sqrt(h)
    for n in range(n_steps):
        svals[n] = em_step(pos[n], xn, fp, ekey, nkey, n, h, sqrt_h, b, noise_on)
        pos[n + 1] = xn
    return pos, svals


@njit(cache=True)
def sup_displacement_batch(fp, seed, env_idx, traj_idx, x0, h, n_steps, level, noise_on):
    """For each path: 1 if sup_{n <= n_steps} |X_n - X_0| >= level else 0."""
    n = env_idx.shape[0]
    d = x0.shape[0]
    hit = np.zeros(n, np.int64)
    b = np.empty(d)
    sqrt_h = math.sqrt(h)
    l2 = level * level
    for k in range(n):
        ekey = env_key(seed, env_idx[k])
        nkey = derive(trajectory_key(seed, env_idx[k], traj_idx[k]), TAG_NOISE)
        x = x0.copy()
        xn = np.empty(d)
        for m in range(n_steps):
            em_step(x, xn, fp, ekey, nkey, m, h, sqrt_h, b, noise_on)
            r2 = 0.0
            for i in range(d):
                r2 += (xn[i] - x0[i]) ** 2
            if r2 >= l2:
                hit[k] = 1
                break
            x, xn = xn, x
    return hit


@njit(cache=True)
def endpoint_batch(fp, seed, env_idx, traj_idx, x0, h, n_steps, noise_on):
    n = env_idx.shape[0]
    d = x0.shape[0]
    out = np.empty((n, d))
    b = np.empty(d)
    sqrt_h = math.sqrt(h)
    for k in range(n):
        ekey = env_key(seed, env_idx[k])
        nkey = derive(trajectory_key(seed, env_idx[k], traj_idx[k]), TAG_NOISE)
        x = x0.copy()
        xn = np.empty(d)
        for m in range(n_steps):
            em_step(x, xn, fp, ekey, nkey, m, h, sqrt_h, b, noise_on)
            x, xn = xn, x
        out[k] = x
    return out


# --------------------------------------------------------------------------
# Python surface


def step(env: Environment, x, rng, h: float = 0.01) -> np.ndarray:
    """One Euler-Maruyama step.  ``rng`` needs ``normal(size)``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(rng.normal(size=x.shape[0]), dtype=float)
    return x + env.drift(x) * h + env.sigma(x) @ xi * math.sqrt(h)


@dataclass
class Trajectory:
    """A recorded discrete path.

    ``svals`` holds s(X_n) per step (None means s = 1, e.g. constructed
    paths); ``bridge_key`` is the uniform stream used by crossing tests.
    """

    x0: np.ndarray
    h: float
    positions: np.ndarray
    rng_stream_id: tuple = (0, 0, 0)
    svals: np.ndarray | None = None
    bridge_key: np.uint64 = field(default=np.uint64(0))

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.positions)) * self.h

    @classmethod
    def from_positions(cls, positions, h, stream_id=(0, 0, 0)):
        pos = np.atleast_2d(np.asarray(positions, dtype=float))
        if pos.shape[0] == 1 and np.ndim(positions) == 1:
            pos = pos.T
        seed, e, t = stream_id
        bkey = np.uint64(stream_key(seed_to_u64(seed), e, t, TAG_BRIDGE_TEST))
        return cls(pos[0].copy(), h, pos, stream_id, None, bkey)


def simulate_trajectory(env: Environment, x0, cfg: IntegratorConfig, traj_index: int, n_steps: int | None = None):
    x0 = np.asarray(x0, dtype=float)
    n = cfg.max_steps if n_steps is None else int(n_steps)
    pos, svals = simulate_path_kernel(
        env.fp, env.spec.seed, env.env_index, traj_index, x0, cfg.h, n, cfg.noise
    )
    ids = (int(env.spec.seed), env.env_index, int(traj_index))
    bkey = np.uint64(stream_key(env.spec.seed, env.env_index, traj_index, TAG_BRIDGE_TEST))
    return Trajectory(x0, cfg.h, pos, ids, svals, bkey)


@dataclass
class ExitRecord:
    exited: bool
    step: int
    time: float
    position: np.ndarray
    side: int


def first_exit(traj: Trajectory, region: Region, boundary_correction: str = "none") -> ExitRecord:
    """First grid time at which the recorded path leaves ``region``.

    Timeout (the path never leaves) is reported with ``exited=False``.
    """
    reg = region.array()
    pos = traj.positions
    if not region_inside(reg, pos[0]):
        return ExitRecord(True, 0, 0.0, pos[0].copy(), int(region_side(reg, pos[0])))
    bridge = boundary_correction == "bridge_test"
    for n in range(len(pos) - 1):
        if not region_inside(reg, pos[n + 1]):
            return ExitRecord(True, n + 1, (n + 1) * traj.h, pos[n + 1].copy(), int(region_side(reg, pos[n + 1])))
        if bridge:
            s = 1.0 if traj.svals is None else traj.svals[n]
            side = bridge_crossing(reg, pos[n], pos[n + 1], s * s * traj.h, uniform(traj.bridge_key, n))
            if side:
                return ExitRecord(True, n + 1, (n + 1) * traj.h, pos[n + 1].copy(), int(side))
    n = len(pos) - 1
    return ExitRecord(False, n, n * traj.h, pos[-1].copy(), 0)


@dataclass
class PathFunctionals:
    running_max: np.ndarray
    J: float
    D: float
    exits: dict


def path_functionals(traj: Trajectory, l, R: float, boundary_correction: str = "none", regions=None) -> PathFunctionals:
    """Running maximum M(t) of X.l, backtrack time J and D = ceil(J).

    J is the first grid time with (X_t - X_0).l <= -R (or a bridge-detected
    crossing of that level); J = D = inf if none within the horizon.
    """
    lvec = np.asarray(l, dtype=float)
    proj = traj.positions @ lvec
    running_max = np.maximum.accumulate(proj)
    back = Region.enter_down(lvec, float(proj[0]) - R)
    rec = first_exit(traj, back, boundary_correction)
    m = int(round(1.0 / traj.h))
    if rec.exited:
        J = rec.step * traj.h
        D = float((rec.step + m - 1) // m)
    else:
        J = D = math.inf
    exits = {}
    for name, reg in (regions or {}).items():
        exits[name] = first_exit(traj, reg, boundary_correction)
    return PathFunctionals(running_max, J, D, exits)


@dataclass
class ExitSample:
    """Outcome of a batch of exit simulations (one entry per trajectory)."""

    status: np.ndarray
    steps: np.ndarray
    sides: np.ndarray
    positions: np.ndarray
    h: float

    @property
    def n(self) -> int:
        return len(self.status)

    @property
    def n_exited(self) -> int:
        return int(np.sum(self.status == EXITED))

    @property
    def n_censored(self) -> int:
        return int(np.sum(self.status == TIMEOUT))

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.h


def sample_exits(
    spec: EnvironmentSpec,
    region: Region,
    n: int,
    cfg: IntegratorConfig,
    x0=None,
    annealed: bool = True,
    env_index: int = 0,
    first_traj: int = 0,
) -> ExitSample:
    """Exit records for n trajectories from x0.

    Annealed mode uses env_index = trajectory_index (a fresh environment per
    path); quenched mode reuses ``env_index`` for every path.
    """
    d = spec.dimension
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    fp, seed, reg = spec.params(), spec.seed, region.array()
    traj = np.arange(first_traj, first_traj + n, dtype=np.int64)
    envs = traj.copy() if annealed else np.full(n, env_index, dtype=np.int64)

    def work(a, b):
        return exit_batch(fp, seed, envs[a:b], traj[a:b], x0, reg, cfg.h, cfg.max_steps, cfg.bridge, cfg.noise)

    parts = farm.map_chunks(work, n)
    cat = lambda i: np.concatenate([p[i] for p in parts])  # noqa: E731
    return ExitSample(cat(0), cat(1), cat(2), cat(3), cfg.h)


def bernstein_bound(L: float, alpha: float, b_bar: float, nu: float, d: int) -> float:
    """2d exp(-(L^2 - alpha b_bar L)^2 / (2 d nu alpha L)), capped at 1."""
    gap = max(L * L - alpha * b_bar * L, 0.0)
    return min(1.0, 2 * d * math.exp(-(gap**2) / (2 * d * nu * alpha * L)))


def displacement_tail(
    spec: EnvironmentSpec, alpha: float, L_ladder, n: int, cfg: IntegratorConfig, first_traj: int = 0
) -> list[dict]:
    """Annealed estimates of P[sup_{s <= alpha L} |X_s - X_0| >= L^2] per L."""
    if len(L_ladder) == 0:
        raise ValueError("L ladder must be nonempty")
    d = spec.dimension
    fp, seed = spec.params(), spec.seed
    traj = np.arange(first_traj, first_traj + n, dtype=np.int64)
    rows = []
    for L in L_ladder:
        n_steps = int(math.ceil(alpha * L * cfg.steps_per_unit - 1e-9))

        def work(a, b, n_steps=n_steps, L=L):
            return sup_displacement_batch(fp, seed, traj[a:b], traj[a:b], np.zeros(d), cfg.h, n_steps, L * L, cfg.noise)

        hits = int(np.concatenate(farm.map_chunks(work, n)).sum())
        lo, hi = wilson_interval(hits, n)
        rows.append(
            dict(
                L=float(L),
                alpha=float(alpha),
                n=n,
                hits=hits,
                p_hat=hits / n,
                ci_low=lo,
                ci_high=hi,
                bernstein_bound=bernstein_bound(L, alpha, spec.drift_bound, spec.ellipticity_nu, d),
            )
        )
    return rows


def endpoints(spec: EnvironmentSpec, n: int, T: float, cfg: IntegratorConfig, first_traj: int = 0, annealed=True, env_index=0):
    """X_T for n paths from the origin (plain quenched kernel, no coupling)."""
    d = spec.dimension
    fp, seed = spec.params(), spec.seed
    traj = np.arange(first_traj, first_traj + n, dtype=np.int64)
    envs = traj.copy() if annealed else np.full(n, env_index, dtype=np.int64)
    n_steps = int(round(T * cfg.steps_per_unit))

    def work(a, b):
        return endpoint_batch(fp, seed, envs[a:b], traj[a:b], np.zeros(d), cfg.h, n_steps, cfg.noise)

    return np.concatenate(farm.map_chunks(work, n))
