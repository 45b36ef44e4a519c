"""Coupled diffusion, regeneration times and renewal blocks.

The coupled process attaches a Bernoulli(p) coin lambda_m to each integer
time m.  At the candidate times of the regeneration search (see
``regeneration_scan``), a success replaces the next unit of time with a
guided bridge: the endpoint y is uniform on B^x = B_R(x + 9R l) and the
path is conditioned, by rejection, to stay in U^x = B_6R(x + 5R l).
On failure the plain quenched kernel is used.

Regeneration times are found online with a stack of tentative times.  A
tentative tau = S is kept while the path stays above X_S.l - R; a drop
below that level (the backtrack time D) invalidates it and every tentative
time above it, and the search resumes at the integer time S + D from
level M + R, M being the running maximum in the frame of the search.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from . import farm
from .env import Environment, EnvironmentSpec, eval_env
from .rng import (
    TAG_BRIDGE_TEST,
    TAG_COUPLING,
    TAG_LAMBDA,
    TAG_NOISE,
    derive,
    env_key,
    normal,
    trajectory_key,
    uniform,
)
from .sde import IntegratorConfig, em_step
from .stats import InsufficientDataError, ks_2samp, lag1_permutation_test

COUPLING_MODES = ("geometric_bridge", "weighted_bridge")

OK, BRIDGE_FAILED, OVERFLOW = 0, 1, 2
SEEK, OSC, WAIT = 0, 1, 2
MAX_ENTRIES = 1024


@dataclass(frozen=True)
class CouplingConfig:
    direction: tuple = (1.0, 0.0)
    success_p: float = 0.05
    mode: str = "geometric_bridge"
    bridge_max_rejects: int = 1000

    def problems(self) -> list[str]:
        out = []
        l = np.asarray(self.direction, float)
        if abs(np.linalg.norm(l) - 1.0) > 1e-12:
            out.append(f"direction: must be a unit vector (|l| = {np.linalg.norm(l):.15g})")
        if not 0.0 < self.success_p < 1.0:
            out.append("success_p: must lie in (0, 1)")
        if self.mode not in COUPLING_MODES:
            out.append(f"mode: must be one of {COUPLING_MODES}")
        if self.bridge_max_rejects < 0:
            out.append("bridge_max_rejects: must be >= 0")
        return out

    def check(self) -> "CouplingConfig":
        from .env import SpecError

        probs = self.problems()
        if probs:
            raise SpecError(probs)
        return self

    @property
    def l(self) -> np.ndarray:
        return np.asarray(self.direction, float)


# --------------------------------------------------------------------------
# coupling segment


@njit(cache=True)
def uniform_in_ball(key, d, out):
    """Uniform point in the unit ball from counters 0..d of ``key``."""
    r2 = 0.0
    for i in range(d):
        out[i] = normal(key, i)
        r2 += out[i] * out[i]
    rad = uniform(key, 2 * d + 2) ** (1.0 / d) / math.sqrt(r2)
    for i in range(d):
        out[i] *= rad


@njit(cache=True)
def bridge_segment(fp, ekey, ckey, x, lvec, R, h, m, max_rejects, out):
    """Guided bridge over one unit of time from x, written to out[0..m].

    Returns (ok, attempts, log_weight).  The log weight is the discrete
    Girsanov log-density of the plain kernel against the guided one.
    """
    d = x.shape[0]
    y = np.empty(d)
    uniform_in_ball(derive(ckey, 0), d, y)
    cu = np.empty(d)
    for i in range(d):
        y[i] = x[i] + 9.0 * R * lvec[i] + R * y[i]
        cu[i] = x[i] + 5.0 * R * lvec[i]
    r2max = 36.0 * R * R
    b = np.empty(d)
    sqrt_h = math.sqrt(h)
    for attempt in range(max_rejects + 1):
        akey = derive(ckey, attempt + 1)
        out[0] = x
        ok = True
        logw = 0.0
        for j in range(m - 1):
            t = j * h
            s = eval_env(out[j], fp, ekey, b)
            r2 = 0.0
            for i in range(d):
                g = (y[i] - out[j, i]) / (1.0 - t)
                xi = normal(akey, j * d + i)
                out[j + 1, i] = out[j, i] + (b[i] + g) * h + s * sqrt_h * xi
                gs = g / s
                logw += -gs * sqrt_h * xi - 0.5 * gs * gs * h
                z = out[j + 1, i] - cu[i]
                r2 += z * z
            if r2 >= r2max:
                ok = False
                break
        if ok:
            out[m] = y
            return True, attempt + 1, logw
    return False, max_rejects + 1, 0.0


@njit(cache=True)
def coupled_segment_kernel(fp, seed, env_index, traj_index, unit, x, lvec, R, p, h, m, max_rejects, force):
    """One unit of the coupled process started at x at integer time ``unit``.

    force: -1 draws lambda, 0 or 1 forces it.  Returns (path, lambda, ok,
    attempts, log_weight).
    """
    d = x.shape[0]
    ekey = env_key(seed, env_index)
    tkey = trajectory_key(seed, env_index, traj_index)
    lam = force
    if force < 0:
        lam = 1 if uniform(derive(tkey, TAG_LAMBDA), unit) < p else 0
    out = np.empty((m + 1, d))
    if lam == 1:
        ckey = derive(derive(tkey, TAG_COUPLING), unit)
        ok, att, logw = bridge_segment(fp, ekey, ckey, x, lvec, R, h, m, max_rejects, out)
        return out, lam, ok, att, logw
    nkey = derive(tkey, TAG_NOISE)
    b = np.empty(d)
    out[0] = x
    for j in range(m):
        em_step(out[j], out[j + 1], fp, ekey, nkey, unit * m + j, h, math.sqrt(h), b, True)
    return out, lam, True, 0, 0.0


@njit(cache=True)
def bridge_endpoint_batch(fp, seed, env_idx, traj_idx, x, lvec, R, h, m, max_rejects):
    """Forced lambda = 1 segments: endpoints, max distance to U's center, ok flags."""
    n = env_idx.shape[0]
    d = x.shape[0]
    ends = np.empty((n, d))
    maxr = np.empty(n)
    oks = np.empty(n, np.bool_)
    out = np.empty((m + 1, d))
    for k in range(n):
        ekey = env_key(seed, env_idx[k])
        ckey = derive(derive(trajectory_key(seed, env_idx[k], traj_idx[k]), TAG_COUPLING), 0)
        ok, att, lw = bridge_segment(fp, ekey, ckey, x, lvec, R, h, m, max_rejects, out)
        oks[k] = ok
        ends[k] = out[m]
        r = 0.0
        for j in range(m + 1):
            r2 = 0.0
            for i in range(d):
                z = out[j, i] - x[i] - 5.0 * R * lvec[i]
                r2 += z * z
            r = max(r, math.sqrt(r2))
        maxr[k] = r
    return ends, maxr, oks


@dataclass
class CoupledSegment:
    path: np.ndarray
    lam: int
    failed: bool
    attempts: int
    log_weight: float


def coupled_unit_segment(
    env: Environment,
    x,
    cfg: CouplingConfig,
    integ: IntegratorConfig = IntegratorConfig(),
    traj_index: int = 0,
    unit: int = 0,
    force_lambda: int | None = None,
) -> CoupledSegment:
    """One unit of coupled dynamics from x; the (traj_index, unit) pair selects the randomness."""
    x = np.asarray(x, float)
    force = -1 if force_lambda is None else int(force_lambda)
    path, lam, ok, att, lw = coupled_segment_kernel(
        env.fp, env.spec.seed, env.env_index, traj_index, unit, x, cfg.l, env.spec.range,
        cfg.success_p, integ.h, integ.steps_per_unit, cfg.bridge_max_rejects, force,
    )
    return CoupledSegment(path, int(lam), not ok, int(att), float(lw) if cfg.mode == "weighted_bridge" else 0.0)


def bridge_endpoints(spec: EnvironmentSpec, cfg: CouplingConfig, n: int, integ: IntegratorConfig = IntegratorConfig(), x=None):
    """Endpoints of n forced-success segments from x (fresh environment each).

    Returns (endpoints, max |X_s - center(U^x)| per path, ok flags).
    """
    d = spec.dimension
    x = np.zeros(d) if x is None else np.asarray(x, float)
    fp, seed = spec.params(), spec.seed
    idx = np.arange(n, dtype=np.int64)

    def work(a, b):
        return bridge_endpoint_batch(fp, seed, idx[a:b], idx[a:b], x, cfg.l, spec.range, integ.h,
                                     integ.steps_per_unit, cfg.bridge_max_rejects)

    parts = farm.map_chunks(work, n)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


# --------------------------------------------------------------------------
# regeneration scan


@njit(cache=True)
def _frame_sup(pos, o, n):
    d = pos.shape[1]
    best = 0.0
    for t in range(o, n + 1):
        r2 = 0.0
        for i in range(d):
            z = pos[t, i] - pos[o, i]
            r2 += z * z
        if r2 > best:
            best = r2
    return math.sqrt(best)


@njit(cache=True)
def _frame_max(proj, o, n):
    best = proj[o]
    for t in range(o + 1, n + 1):
        if proj[t] > best:
            best = proj[t]
    return best


@njit(cache=True)
def scan_kernel(fp, seed, env_index, traj_index, lvec, R, p, h, m, n_steps, bridge, max_rejects,
                given, lam_seq, pos, proj, e_S, e_sup):
    """Simulate (or read, if ``given``) a coupled path and find tentative taus.

    pos/proj are buffers of length n_steps + 1 with pos[0] set.  Returns
    (n_entries, status, last_step, n_candidates, n_bridges, log_weight,
    min_proj).  e_S holds the steps of tentative regeneration times and e_sup
    the sup displacement of the block that ended there.
    """
    d = pos.shape[1]
    ekey = env_key(seed, env_index)
    tkey = trajectory_key(seed, env_index, traj_index)
    nkey = derive(tkey, TAG_NOISE)
    bkey = derive(tkey, TAG_BRIDGE_TEST)
    lkey = derive(tkey, TAG_LAMBDA)
    ckey0 = derive(tkey, TAG_COUPLING)
    b = np.empty(d)
    seg = np.empty((m + 1, d))
    sqrt_h = math.sqrt(h)

    acc = 0.0
    for i in range(d):
        acc += pos[0, i] * lvec[i]
    proj[0] = acc
    x0l = acc
    min_proj = acc
    top = 0
    origin = 0
    cur_max = acc
    phase = SEEK
    target = acc + 3.0 * R
    osc_ref = 0.0
    osc_fail = False
    wait_until = 0
    n_cand = 0
    n_bridge = 0
    logw = 0.0
    status = OK
    n = 0
    while n < n_steps:
        if n % m == 0:
            if phase == WAIT and n >= wait_until:
                phase = SEEK
                target = cur_max + R
            elif phase == OSC:
                if osc_fail:
                    phase = SEEK
                    target = cur_max + R
                else:
                    n_cand += 1
                    unit = n // m
                    if lam_seq.shape[0] > 0:
                        lam = lam_seq[unit] != 0
                    else:
                        lam = uniform(lkey, unit) < p
                    if lam:
                        if n + m > n_steps:
                            break
                        if not given:
                            ok, att, lw = bridge_segment(fp, ekey, derive(ckey0, unit), pos[n], lvec, R, h, m,
                                                         max_rejects, seg)
                            if not ok:
                                status = BRIDGE_FAILED
                                break
                            logw += lw
                            for j in range(1, m + 1):
                                pos[n + j] = seg[j]
                        n_bridge += 1
                        # the bridge stays above X_N.l - R, which exceeds every
                        # pending backtrack level, so no tentative tau can drop here
                        for j in range(1, m + 1):
                            a2 = 0.0
                            for i in range(d):
                                a2 += pos[n + j, i] * lvec[i]
                            proj[n + j] = a2
                            if a2 > cur_max:
                                cur_max = a2
                        n += m
                        if top >= e_S.shape[0]:
                            status = OVERFLOW
                            break
                        e_S[top] = n
                        e_sup[top] = _frame_sup(pos, origin, n)
                        top += 1
                        origin = n
                        cur_max = proj[n]
                        target = proj[n] + 3.0 * R
                        phase = SEEK
                        continue
                    phase = SEEK
                    target = proj[n] + 3.0 * R
        # ordinary step
        s = 1.0
        if not given:
            s = em_step(pos[n], pos[n + 1], fp, ekey, nkey, n, h, sqrt_h, b, True)
        p0 = proj[n]
        a2 = 0.0
        for i in range(d):
            a2 += pos[n + 1, i] * lvec[i]
        proj[n + 1] = a2
        n += 1
        p1 = a2
        if p1 < min_proj:
            min_proj = p1
        if top > 0:
            u = uniform(bkey, n - 1) if bridge else 2.0
            var = s * s * h
            last = -1
            while top > 0:
                c = proj[e_S[top - 1]] - R
                crossed = p1 <= c
                if not crossed and bridge and p0 > c:
                    crossed = u < math.exp(-2.0 * (p0 - c) * (p1 - c) / var)
                if not crossed:
                    break
                top -= 1
                last = top
            if last >= 0:
                S_e = e_S[last]
                back = n - S_e
                wait_until = S_e + ((back + m - 1) // m) * m
                origin = e_S[last - 1] if last > 0 else 0
                cur_max = _frame_max(proj, origin, n)
                phase = WAIT
                continue
        if p1 > cur_max:
            cur_max = p1
        if phase == SEEK:
            if p1 >= target:
                phase = OSC
                osc_ref = p1
                osc_fail = False
        elif phase == OSC:
            if abs(p1 - osc_ref) >= 0.5 * R:
                osc_fail = True
    return top, status, n, n_cand, n_bridge, logw, min_proj - x0l


@njit(cache=True)
def scan_batch_kernel(fp, seed, env_idx, traj_idx, x0, lvec, R, p, h, m, n_steps, bridge, max_rejects, cap):
    n = env_idx.shape[0]
    d = x0.shape[0]
    pos = np.empty((n_steps + 1, d))
    proj = np.empty(n_steps + 1)
    e_S = np.empty(cap, np.int64)
    e_sup = np.empty(cap)
    lam_seq = np.empty(0, np.int64)
    counts = np.zeros(n, np.int64)
    info_i = np.zeros((n, 4), np.int64)  # status, last step, candidates, bridges
    info_f = np.zeros((n, 2))  # log weight, min (X - X_0).l
    ends = np.empty((n, d))
    S_all = np.empty((n, cap), np.int64)
    X_all = np.empty((n, cap, d))
    sup_all = np.empty((n, cap))
    for k in range(n):
        pos[0] = x0
        top, st, last, nc, nb, lw, mn = scan_kernel(fp, seed, env_idx[k], traj_idx[k], lvec, R, p, h, m, n_steps,
                                                    bridge, max_rejects, False, lam_seq, pos, proj, e_S, e_sup)
        counts[k] = top
        info_i[k, 0] = st
        info_i[k, 1] = last
        info_i[k, 2] = nc
        info_i[k, 3] = nb
        info_f[k, 0] = lw
        info_f[k, 1] = mn
        ends[k] = pos[last]
        for j in range(top):
            S_all[k, j] = e_S[j]
            X_all[k, j] = pos[e_S[j]]
            sup_all[k, j] = e_sup[j]
    return counts, info_i, info_f, ends, S_all, X_all, sup_all


@dataclass
class RegenerationRecord:
    """Block k runs from tau_k to tau_{k+1} (tau_0 = 0)."""

    trajectory_index: int
    env_index: int
    k: int
    tau_k: int
    X_tau_k: list
    block_increment: list
    block_duration: int
    sup_displacement: float
    censored: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockTable:
    """Columnar store of renewal blocks plus per-trajectory diagnostics.

    Block rows: traj, k, tau (integer time), x_tau (d), inc (d), dur, sup,
    censored.  Trajectory rows: no_backtrack (D = inf within horizon from the
    start), status, endpoint, horizon time, candidates, bridges, log weight.
    """

    traj: np.ndarray
    env: np.ndarray
    k: np.ndarray
    tau: np.ndarray
    x_tau: np.ndarray
    inc: np.ndarray
    dur: np.ndarray
    sup: np.ndarray
    censored: np.ndarray
    l: np.ndarray
    R: float
    h: float
    horizon: float
    t_traj: np.ndarray | None = None
    t_env: np.ndarray | None = None
    no_backtrack: np.ndarray | None = None
    status: np.ndarray | None = None
    endpoint: np.ndarray | None = None
    t_end: np.ndarray | None = None
    n_candidates: np.ndarray | None = None
    n_bridges: np.ndarray | None = None
    log_weight: np.ndarray | None = None

    @classmethod
    def from_blocks(cls, traj, k, dur, inc, censored=None, sup=None, l=(1.0,), R=1.0, h=0.01, no_backtrack=None):
        """Table from synthetic per-block arrays (tau and x_tau are cumulated)."""
        traj = np.asarray(traj, np.int64)
        k = np.asarray(k, np.int64)
        dur = np.asarray(dur, float)
        inc = np.atleast_2d(np.asarray(inc, float))
        if inc.shape[0] != len(dur):
            inc = inc.T
        n = len(dur)
        tau = np.zeros(n)
        x_tau = np.zeros_like(inc)
        for t in np.unique(traj):
            idx = np.flatnonzero(traj == t)
            idx = idx[np.argsort(k[idx])]
            tau[idx] = np.r_[0, np.cumsum(dur[idx])[:-1]]
            x_tau[idx] = np.vstack([np.zeros(inc.shape[1]), np.cumsum(inc[idx], axis=0)[:-1]])
        censored = np.zeros(n, bool) if censored is None else np.asarray(censored, bool)
        sup = np.linalg.norm(inc, axis=1) if sup is None else np.asarray(sup, float)
        ut = np.unique(traj)
        nb = np.ones(len(ut), bool) if no_backtrack is None else np.asarray(no_backtrack, bool)
        return cls(traj, traj.copy(), k, tau, x_tau, inc, dur, sup, censored, np.asarray(l, float), R, h, math.inf,
                   t_traj=ut, t_env=ut.copy(), no_backtrack=nb)

    def __len__(self) -> int:
        return len(self.k)

    def uncensored(self, k_min: int = 0) -> np.ndarray:
        return (~self.censored) & (self.k >= k_min)

    def records(self):
        for i in range(len(self)):
            yield RegenerationRecord(
                int(self.traj[i]), int(self.env[i]), int(self.k[i]), int(round(self.tau[i])),
                [float(v) for v in self.x_tau[i]], [float(v) for v in self.inc[i]],
                int(round(self.dur[i])) if np.isfinite(self.dur[i]) else -1,
                float(self.sup[i]), bool(self.censored[i]),
            )

    @property
    def n_traj(self) -> int:
        return 0 if self.t_traj is None else len(self.t_traj)

    def tau1_confirmed(self) -> np.ndarray:
        """Per trajectory: whether tau_1 was found and confirmed within the horizon."""
        ok = np.zeros(self.n_traj, bool)
        pos = {t: i for i, t in enumerate(self.t_traj)}
        for t, kk, c in zip(self.traj, self.k, self.censored):
            if kk == 0 and not c:
                ok[pos[t]] = True
        return ok


@dataclass
class ScanResult:
    table: BlockTable
    n_bridge_failed: int
    n_overflow: int


def _assemble(counts, info_i, info_f, ends, S_all, X_all, sup_all, traj_ids, env_ids, x0, l, R, h, m, n_steps,
              tail_steps) -> BlockTable:
    rows = dict(traj=[], env=[], k=[], tau=[], x_tau=[], inc=[], dur=[], sup=[], censored=[])
    d = len(x0)
    for t in range(len(counts)):
        if info_i[t, 0] != OK:
            continue
        c = counts[t]
        S = S_all[t, :c]
        confirmed = S <= n_steps - tail_steps
        taus = np.r_[0, S[confirmed]]
        xs = np.vstack([x0[None, :], X_all[t, :c][confirmed]])
        sups = sup_all[t, :c]
        nconf = int(confirmed.sum())
        for k in range(nconf + 1):
            rows["traj"].append(traj_ids[t])
            rows["env"].append(env_ids[t])
            rows["k"].append(k)
            rows["tau"].append(taus[k] / m)
            rows["x_tau"].append(xs[k])
            if k < nconf:
                rows["inc"].append(xs[k + 1] - xs[k])
                rows["dur"].append((taus[k + 1] - taus[k]) / m)
                rows["sup"].append(sups[k])
                rows["censored"].append(False)
            else:
                rows["inc"].append(np.full(d, np.nan))
                rows["dur"].append(np.nan)
                rows["sup"].append(np.nan)
                rows["censored"].append(True)
    good = info_i[:, 0] == OK
    arr = lambda key, dt: np.asarray(rows[key], dtype=dt)  # noqa: E731
    xt = np.asarray(rows["x_tau"], float).reshape(-1, d)
    inc = np.asarray(rows["inc"], float).reshape(-1, d)
    return BlockTable(
        arr("traj", np.int64), arr("env", np.int64), arr("k", np.int64), arr("tau", float), xt, inc,
        arr("dur", float), arr("sup", float), arr("censored", bool), l, R, h, n_steps / m,
        t_traj=traj_ids[good], t_env=env_ids[good],
        no_backtrack=info_f[good, 1] > -R, status=info_i[:, 0], endpoint=ends[good],
        t_end=info_i[good, 1] / m, n_candidates=info_i[good, 2], n_bridges=info_i[good, 3],
        log_weight=info_f[good, 0],
    )


def regeneration_scan(
    spec: EnvironmentSpec,
    coupling: CouplingConfig,
    integ: IntegratorConfig,
    horizon: float,
    n_traj: int = 1,
    first_traj: int = 0,
    annealed: bool = True,
    env_index: int = 0,
    tail_margin: float = 20.0,
    x0=None,
) -> ScanResult:
    """Regeneration blocks for n_traj coupled trajectories over [0, horizon].

    A tentative tau_k is confirmed (D = inf) when the path stays above
    X_tau.l - R up to the horizon and tau_k <= horizon - tail_margin;
    later ones are reported as censored.  Trajectories whose bridge sampler
    exhausted its rejections are discarded and counted.
    """
    m = integ.steps_per_unit
    n_steps = int(round(horizon * m))
    d = spec.dimension
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, float)
    l = coupling.l
    fp, seed = spec.params(), spec.seed
    traj = np.arange(first_traj, first_traj + n_traj, dtype=np.int64)
    envs = traj.copy() if annealed else np.full(n_traj, env_index, np.int64)
    cap = MAX_ENTRIES

    def work(a, b):
        return scan_batch_kernel(fp, seed, envs[a:b], traj[a:b], x0, l, spec.range, coupling.success_p, integ.h, m,
                                 n_steps, integ.bridge, coupling.bridge_max_rejects, cap)

    parts = farm.map_chunks(work, n_traj, size=8)
    cat = [np.concatenate([p[i] for p in parts]) for i in range(7)]
    table = _assemble(*cat, traj, envs, x0, l, spec.range, integ.h, m, n_steps, int(round(tail_margin * m)))
    st = cat[1][:, 0]
    return ScanResult(table, int(np.sum(st == BRIDGE_FAILED)), int(np.sum(st == OVERFLOW)))


def scan_given_path(positions, l, R: float, h: float, lam, tail_margin: float = 0.0, bridge: bool = False):
    """Run the regeneration search on a recorded path with a given coin sequence.

    ``lam[m]`` is the coin at integer time m.  A success uses the recorded
    path as the coupled segment.  Returns (taus, sups): the tentative
    regeneration times (in time units) confirmed within the record, and the
    block sup displacements.
    """
    pos = np.ascontiguousarray(np.atleast_2d(np.asarray(positions, float)))
    if pos.shape[0] == 1:
        pos = pos.T.copy()
    m = int(round(1.0 / h))
    n_steps = len(pos) - 1
    proj = np.empty(n_steps + 1)
    e_S = np.empty(MAX_ENTRIES, np.int64)
    e_sup = np.empty(MAX_ENTRIES)
    lam = np.asarray(lam, np.int64)
    top, st, last, nc, nb, lw, mn = scan_kernel(
        np.zeros(1), np.uint64(0), 0, 0, np.asarray(l, float), R, 0.0, h, m, n_steps, bridge, 0, True, lam, pos,
        proj, e_S, e_sup,
    )
    S = e_S[:top]
    keep = S <= n_steps - int(round(tail_margin * m))
    return S[keep] / m, e_sup[:top][keep]


# --------------------------------------------------------------------------
# renewal tests


@dataclass
class RenewalReport:
    n_blocks: int
    tests: list
    min_gap_fraction: float
    min_gap: float
    alpha: float = 0.01

    @property
    def passed(self) -> bool:
        return all(t["p_value"] >= self.alpha for t in self.tests)

    def to_dict(self) -> dict:
        return dict(n_blocks=self.n_blocks, tests=self.tests, min_gap_fraction=self.min_gap_fraction,
                    min_gap=self.min_gap, alpha=self.alpha, passed=self.passed)


def renewal_tests(table: BlockTable, min_blocks: int = 200, alpha: float = 0.01, n_perm: int = 999,
                  gap_tolerance: float | None = None, b_bar: float = 0.0) -> RenewalReport:
    """Independence and identical-distribution checks on renewal blocks.

    (a) KS of block durations, k = 1 vs k = 2; (b) the same for the l
    component of block increments; (c) lag-1 correlation of successive
    durations within trajectories with a permutation p-value; (d) KS of
    k >= 1 blocks against the first block (0 to tau_1) restricted to
    trajectories that never backtracked by R from the start.
    """
    ok = table.uncensored(1)
    n = int(ok.sum())
    if n < min_blocks:
        raise InsufficientDataError(f"{n} uncensored blocks with k >= 1, need {min_blocks}")
    l = table.l
    incl = table.inc @ l
    tests = []

    def add(name, stat, p, n_a, n_b):
        tests.append(dict(name=name, statistic=float(stat), p_value=float(p), n_a=int(n_a), n_b=int(n_b)))

    # pairs of first and second blocks from the same trajectory
    k1 = table.uncensored() & (table.k == 1)
    k2 = table.uncensored() & (table.k == 2)
    both = np.intersect1d(table.traj[k1], table.traj[k2])
    sel1 = k1 & np.isin(table.traj, both)
    sel2 = k2 & np.isin(table.traj, both)
    if sel1.sum() >= 2:
        add("ks_duration_k1_vs_k2", *ks_2samp(table.dur[sel1], table.dur[sel2]), sel1.sum(), sel2.sum())
        add("ks_increment_l_k1_vs_k2", *ks_2samp(incl[sel1], incl[sel2]), sel1.sum(), sel2.sum())
    series = []
    for t in np.unique(table.traj[ok]):
        idx = np.flatnonzero(ok & (table.traj == t))
        idx = idx[np.argsort(table.k[idx])]
        series.append(table.dur[idx])
    r, p = lag1_permutation_test(series, n_perm=n_perm)
    add("lag1_duration_permutation", r, p, sum(len(s) for s in series), 0)
    if table.no_backtrack is not None and table.t_traj is not None:
        nb_traj = table.t_traj[table.no_backtrack]
        z0 = table.uncensored() & (table.k == 0) & np.isin(table.traj, nb_traj)
        if z0.sum() >= 2:
            add("ks_duration_k_ge1_vs_first_given_no_backtrack", *ks_2samp(table.dur[ok], table.dur[z0]), n, z0.sum())
            add("ks_increment_l_k_ge1_vs_first_given_no_backtrack", *ks_2samp(incl[ok], incl[z0]), n, z0.sum())
    allok = table.uncensored()
    tol = 2 * table.h * b_bar if gap_tolerance is None else gap_tolerance
    gaps = incl[allok]
    need = 10.5 * table.R - tol
    frac = float(np.mean(gaps >= need)) if len(gaps) else math.nan
    return RenewalReport(n, tests, frac, float(gaps.min()) if len(gaps) else math.nan, alpha)
