"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Slow criteria run the shipped configs under configs/ through the CLI runner.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np

from diffrenv.ballistic import SlabSpec, slab_exit_probability
from diffrenv.config import load_config
from diffrenv.env import AmplitudeLaw, Environment, EnvironmentSpec, sign_split_moments
from diffrenv.kalikow import DomainGrid, auxiliary_drift, estimate_green
from diffrenv.regen import CouplingConfig, bridge_endpoints
from diffrenv.sde import IntegratorConfig
from diffrenv.stats import chi_square_uniform, clopper_pearson_upper, wilson_interval

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def scale_exit_left(mu, a, b, x=0.0):
    """P(hit a before b) for dX = mu dt + dB: scale function s(y) = exp(-2 mu y)."""
    s = lambda y: math.exp(-2 * mu * y)  # noqa: E731
    return (s(b) - s(x)) / (s(b) - s(a))


def test_c01_symmetric_slab(criterion):
    rec = criterion(1, "symmetric slab oracle")
    sp = EnvironmentSpec(dimension=2, base_drift=(0.0, 0.0))
    t0 = time.perf_counter()
    est = slab_exit_probability(sp, SlabSpec((1.0, 0.0), 1.0, 4.0), 10_000,
                                IntegratorConfig(h=0.01, boundary_correction="bridge_test"))
    dt = time.perf_counter() - t0
    lo, hi = wilson_interval(est.exit_left_count, est.n)
    half = (hi - lo) / 2
    rec(lo <= 0.5 <= hi and half <= 0.02 and est.censored_count == 0 and dt < 60,
        f"p_hat={est.p_hat:.4f} CI=[{lo:.4f},{hi:.4f}] half-width={half:.4f} runtime={dt:.1f}s")


def test_c02_drifted_scale_function(criterion):
    rec = criterion(2, "drifted scale-function oracle")
    p0 = scale_exit_left(0.5, -2.0, 2.0)
    sp = EnvironmentSpec(dimension=1, base_drift=(0.5,))
    t0 = time.perf_counter()
    est = slab_exit_probability(sp, SlabSpec((1.0,), 1.0, 2.0), 20_000,
                                IntegratorConfig(h=0.005, boundary_correction="bridge_test"))
    dt = time.perf_counter() - t0
    se = math.sqrt(est.p_hat * (1 - est.p_hat) / est.n)
    z = (est.p_hat - p0) / se
    rec(abs(z) <= 3 and dt < 120 and abs(p0 - 0.1192) < 5e-5,
        f"p_hat={est.p_hat:.4f} closed form={p0:.4f} z={z:+.2f} runtime={dt:.1f}s")


def test_c03_nonnestling_T_bound(criterion, shipped):
    rec = criterion(3, "non-nestling (T) bound")
    cfg = load_config(CONFIGS / "nonnestling_T.cfg")
    assert cfg.params["n_traj"] == 100_000 and cfg.params["L_ladder"] == (2.0, 4.0, 8.0)
    man, out = shipped("nonnestling_T")
    rows = list(csv.DictReader(open(out / "ladder.csv")))
    fits = json.loads((out / "fits.json").read_text())["fits"]
    ok = True
    parts = []
    for r in rows:
        L, k, n = float(r["L"]), int(r["exit_left"]), int(r["n"])
        up = clopper_pearson_upper(k, n)
        bound = 1.5 * math.exp(-0.5 * L)
        ok &= up <= bound and int(r["censored"]) == 0
        parts.append(f"L={L:g}: p_hat={k / n:.2e} upper={up:.2e} <= {bound:.2e}")
    f = [f for f in fits if f.get("gamma") == 1.0][0]
    ok &= f["slope"] < 0 and f["slope_upper"] < 0
    rec(ok and man.wall_time < 900,
        "; ".join(parts) + f"; slope={f['slope']:.3f} upper={f['slope_upper']:.3f} runtime={man.wall_time:.0f}s")


def test_c04_coupling_contract(criterion):
    rec = criterion(4, "coupling contract")
    sp = EnvironmentSpec(dimension=2, base_drift=(0.55, 0.0), drift_bound=2.0, lipschitz_K=30, bump_intensity=0.4,
                         bump_amplitude_law=AmplitudeLaw.parse("uniform_box: 0, -0.4 | 0.4, 0.4"), master_seed=1)
    ends, maxr, oks = bridge_endpoints(sp, CouplingConfig(), 10_000, IntegratorConfig(h=0.01))
    exits = int(np.sum(maxr >= 6.0)) + int(np.sum(~oks))
    z = ends - np.array([9.0, 0.0])
    r2 = np.sum(z**2, axis=1)
    ring = np.minimum((r2 * 4).astype(int), 3)  # equal-area rings
    sector = ((np.arctan2(z[:, 1], z[:, 0]) + math.pi) / (2 * math.pi) * 8).astype(int) % 8
    counts = np.bincount(ring * 8 + sector, minlength=32)
    stat, p = chi_square_uniform(counts)
    rec(exits == 0 and r2.max() <= 1.0 and p >= 0.01,
        f"exits from U={exits}, max |y-c|={math.sqrt(r2.max()):.3f}, chi2={stat:.1f} (31 df) p={p:.3f}")


def test_c05_renewal_structure(criterion, shipped):
    rec = criterion(5, "renewal structure")
    _, out = shipped("nonnestling_regeneration")
    s = json.loads((out / "renewal.json").read_text())
    tests = {t["name"]: t for t in s["renewal"]["tests"]}
    ks, lag = tests["ks_duration_k1_vs_k2"], tests["lag1_duration_permutation"]
    gapf = s["renewal"]["min_gap_fraction"]
    n = s["uncensored_blocks"]
    rec(n >= 1000 and ks["p_value"] >= 0.01 and lag["p_value"] >= 0.01 and gapf == 1.0,
        f"{n} uncensored blocks; KS k1 vs k2 p={ks['p_value']:.3f}; lag-1 p={lag['p_value']:.3f}; "
        f"gap >= 21R/2 - 2h*b_bar in {100 * gapf:.1f}% (min gap {s['renewal']['min_gap']:.2f})")


def test_c06_lln_consistency(criterion, shipped):
    rec = criterion(6, "LLN consistency")
    _, out = shipped("nonnestling_ballistic")
    b = json.loads((out / "ballistic.json").read_text())
    rec(b["velocity_z"] <= 5 and b["v_l_lower95"] > 0,
        f"block v={np.round(b['velocity'], 4).tolist()} direct v={np.round(b['direct_velocity'], 4).tolist()} "
        f"max |z|={b['velocity_z']:.2f}; v.l 95% lower bound={b['v_l_lower95']:.4f}")


def test_c07_green_oracle(criterion):
    rec = criterion(7, "Green-function oracle")
    # killed Brownian motion on the unit interval (-1/2, 1/2), started at the midpoint:
    # g(0, y) = 1/2 - |y|, mean exit time 1/4
    sp = EnvironmentSpec(dimension=1, base_drift=(0.0,))
    grid = DomainGrid.box([-0.5], [0.5], 0.025)
    g = estimate_green(sp, grid, 20_000, integ=IntegratorConfig(h=2e-4, boundary_correction="bridge_test"))
    mid = g.g_mean[grid.cell_of((0.0,))]
    tot = float(np.sum(g.g_mean) * grid.cell_volume)
    se = g.mean_exit_time_se
    rec(abs(mid - 0.5) <= 0.025 and abs(tot - 0.25) <= 3 * se,
        f"g(mid)={mid:.4f} (rel. err {abs(mid - 0.5) / 0.5:.1%}); sum g*delta={tot:.5f} +- {se:.5f} vs 0.25")


def test_c08_auxiliary_drift_degenerate(criterion):
    rec = criterion(8, "auxiliary-drift degenerate cases")
    sp = EnvironmentSpec(dimension=2, base_drift=(0.4, 0.0), drift_bound=2.0, lipschitz_K=50, bump_intensity=0.8,
                         bump_amplitude_law=AmplitudeLaw.parse("uniform_ball: 0.5"), master_seed=4)
    grid = DomainGrid.ball(4.0, 0.25, 2)
    f = auxiliary_drift(sp, estimate_green(sp, grid, 1, n_traj=400), allow_single_env=True)
    rel = f.reliable
    exact = Environment(sp, 0).drift_many(grid.centers()[rel])
    err1 = float(np.max(np.abs(f.bprime[rel] - exact)))
    det = EnvironmentSpec(dimension=2, base_drift=(0.3, -0.2))
    fd = auxiliary_drift(det, estimate_green(det, grid, 200))
    err2 = float(np.max(np.abs(fd.bprime[fd.reliable] - np.array([0.3, -0.2]))))
    # the ratio of batch sums reproduces b up to floating-point rounding only
    rec(err1 <= 1e-14 and err2 <= 1e-14 and rel.sum() > 100,
        f"n_env=1: max |b' - b| = {err1:.1e} over {int(rel.sum())} reliable cells; "
        f"deterministic field: max |b' - base| = {err2:.1e}")


def test_c09_exit_law_identity(criterion, shipped):
    rec = criterion(9, "exit-law identity")
    cfg = load_config(CONFIGS / "nonnestling_exit_identity.cfg")
    assert cfg.params["radius"] == 12 and cfg.params["n"] == 4000 and cfg.params["repeats"] == 20
    _, out = shipped("nonnestling_exit_identity")
    s = json.loads((out / "exit_identity.json").read_text())
    rows = list(csv.DictReader(open(out / "exit_identity.csv")))
    ps = [float(r["p_value"]) for r in rows]
    first = rows[0]
    rec(float(first["p_value"]) >= 0.01 and s["rejection_rate"] <= 0.05,
        f"seed 0 p={float(first['p_value']):.3f}; rejection rate at 1% over {len(rows)} seeds = "
        f"{s['rejection_rate']:.2f}; min p={min(ps):.3f}")


def test_c10_equivalence(criterion, shipped):
    rec = criterion(10, "equivalence cross-check")
    parts, ok = [], True
    for name in ("drift_free_ballistic", "nonnestling_ballistic", "signchanging_ballistic"):
        _, out = shipped(name)
        e = json.loads((out / "ballistic.json").read_text())["equivalence"][0]
        ok &= e["agree"]
        parts.append(f"{name.split('_ballistic')[0]}: (T)={e['t_verdict']} tau1={e['tau1_verdict']}")
    rec(ok, "; ".join(parts))


def test_c11_sign_changing_demo(criterion, shipped):
    rec = criterion(11, "sign-changing end-to-end demo")
    cfg = load_config(CONFIGS / "signchanging_K.cfg")
    ss = sign_split_moments(cfg.env, (1.0, 0.0), 20_000)
    ratio = ss.mean_plus / ss.mean_minus
    _, kout = shipped("signchanging_K")
    k = json.loads((kout / "condition_K.json").read_text())
    _, tout = shipped("signchanging_T")
    f = [f for f in json.loads((tout / "fits.json").read_text())["fits"] if f.get("gamma") == 1.0][0]
    rec(ratio >= 5 and k["verdict"] == "holds" and f["verdict"] == "consistent",
        f"mean_plus/mean_minus={ratio:.2f}; (K) {k['verdict']} on {len(k['per_domain'])} domains "
        f"(eps_hat={k['epsilon_hat']:.3f}, lower bound {k['lower_bound']:.3f}); (T)_1 slope={f['slope']:.3f} "
        f"upper={f['slope_upper']:.3f} {f['verdict']}")


def test_c12_determinism(criterion, shipped):
    rec = criterion(12, "determinism")
    diffs = []
    names = ("nonnestling_regeneration", "signchanging_criterion")
    for name in names:
        _, a = shipped(name)
        _, b = shipped(name, workers=1)
        _, c = shipped(name, workers=3)
        for f in sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".jsonl", ".json") and p.name != "manifest.json"):
            blobs = {(d / f).read_bytes() for d in (a, b, c)}
            if len(blobs) != 1:
                diffs.append(f"{name}/{f}")
    rec(not diffs, f"{', '.join(names)} run three times (default, 1 and 3 workers): "
        + ("all tabular outputs byte-identical" if not diffs else f"differences in {diffs}"))
