import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffrenv import farm
from diffrenv.env import AmplitudeLaw, Environment, EnvironmentSpec, SpecError
from diffrenv.rng import CounterStream
from diffrenv.sde import (EXITED, IntegratorConfig, Region, Trajectory, bernstein_bound, bridge_crossing,
                          displacement_tail, first_exit, path_functionals, sample_exits, simulate_trajectory, step)

FLAT1 = EnvironmentSpec(dimension=1, base_drift=(0.0,), drift_bound=1.0)
BUMPY = EnvironmentSpec(dimension=2, base_drift=(0.4, 0.0), drift_bound=2.0, lipschitz_K=50, bump_intensity=0.8,
                        bump_amplitude_law=AmplitudeLaw.parse("uniform_ball: 0.5"), master_seed=4)


def scale_exit_left(mu, a, b, x):
    """P(hit a before b) for dX = mu dt + dB via the scale function exp(-2 mu x)."""
    if mu == 0:
        return (b - x) / (b - a)
    s = lambda y: math.exp(-2 * mu * y)  # noqa: E731
    return (s(b) - s(x)) / (s(b) - s(a))


def test_integrator_validation():
    assert IntegratorConfig(h=0.01).problems() == []
    assert any(p.startswith("h:") and "1/h" in p for p in IntegratorConfig(h=0.03).problems())
    assert any(p.startswith("boundary_correction") for p in IntegratorConfig(boundary_correction="x").problems())
    with pytest.raises(SpecError):
        IntegratorConfig(h=0.3).check()
    assert IntegratorConfig(h=0.01, max_time=2.5).max_steps == 250


def test_noise_free_exit_is_deterministic():
    sp = EnvironmentSpec(dimension=2, base_drift=(0.5, 0.0))
    cfg = IntegratorConfig(h=0.01, noise=False)
    ex = sample_exits(sp, Region.slab((1, 0), -1.0, 2.001), 5, cfg)
    assert np.all(ex.steps == 401) and np.all(ex.sides == 1)
    np.testing.assert_allclose(ex.positions[:, 0], 401 * 0.005)


@pytest.mark.parametrize("mu,a,b,x0", [(0.0, -1.0, 2.0, 0.0), (0.5, -2.0, 2.0, 0.0), (-0.3, -1.0, 1.5, 0.5)])
def test_slab_exit_matches_scale_function(mu, a, b, x0):
    sp = EnvironmentSpec(dimension=1, base_drift=(mu,), drift_bound=1.0)
    cfg = IntegratorConfig(h=0.005, boundary_correction="bridge_test")
    n = 6000
    ex = sample_exits(sp, Region.slab((1.0,), a, b), n, cfg, x0=(x0,))
    assert ex.n_censored == 0
    p = np.mean(ex.sides == -1)
    p0 = scale_exit_left(mu, a, b, x0)
    assert abs(p - p0) < 4 * math.sqrt(p0 * (1 - p0) / n)


def test_mean_exit_time_brownian_interval():
    # E tau = (x - a)(b - x) for standard Brownian motion
    cfg = IntegratorConfig(h=0.001, boundary_correction="bridge_test")
    ex = sample_exits(FLAT1, Region.slab((1.0,), -1.0, 1.0), 4000, cfg)
    t = ex.times
    assert abs(t.mean() - 1.0) < 4 * t.std() / math.sqrt(len(t)) + 0.01


def test_ball_exit_position_on_sphere_and_uniform():
    sp = EnvironmentSpec(dimension=2, base_drift=(0.0, 0.0))
    ex = sample_exits(sp, Region.ball((0.0, 0.0), 1.0), 4000, IntegratorConfig(h=0.001))
    r = np.linalg.norm(ex.positions, axis=1)
    assert np.all(r >= 1.0) and np.all(r < 1.2)
    ang = np.arctan2(ex.positions[:, 1], ex.positions[:, 0])
    counts = np.histogram(ang, bins=8, range=(-math.pi, math.pi))[0]
    from scipy.stats import chisquare
    assert chisquare(counts).pvalue > 0.001


def test_bridge_crossing_probability_matches_fine_bridge():
    # independent oracle: densely sampled Brownian bridges between the same endpoints
    reg = Region.enter_up((1.0,), 1.0).array()
    x0, x1, var = np.array([0.8]), np.array([0.9]), 0.01
    u = CounterStream(123).uniform(40000)
    p_test = np.mean([bridge_crossing(reg, x0, x1, var, v) != 0 for v in u])
    rng = np.random.default_rng(0)
    m, n = 2000, 4000
    t = np.linspace(0, 1, m + 1)
    w = np.cumsum(np.c_[np.zeros(n), rng.normal(size=(n, m)) * math.sqrt(var / m)], axis=1)
    bb = 0.8 + w - t * w[:, -1:] + t * 0.1
    p_fine = np.mean(bb.max(axis=1) >= 1.0)
    p_exact = math.exp(-2 * 0.2 * 0.1 / var)
    assert abs(p_test - p_exact) < 4 * math.sqrt(p_exact / 40000)
    assert abs(p_fine - p_exact) < 0.02  # discretisation of the oracle only lowers it slightly


def test_bridge_crossing_sides():
    reg = Region.box((-1.0, -1.0), (1.0, 1.0)).array()
    assert bridge_crossing(reg, np.array([0.99, 0.0]), np.array([0.99, 0.0]), 1.0, 0.5) == 1
    assert bridge_crossing(reg, np.array([0.0, -0.99]), np.array([0.0, -0.99]), 1.0, 0.3) == -2
    assert bridge_crossing(reg, np.array([0.0, 0.0]), np.array([0.0, 0.0]), 1e-4, 0.0) == 0
    ball = Region.ball((0.0, 0.0), 1.0).array()
    assert bridge_crossing(ball, np.array([0.99, 0.0]), np.array([0.99, 0.0]), 1.0, 0.0) == 0


def test_kernel_and_recorded_path_agree():
    cfg = IntegratorConfig(h=0.01, boundary_correction="bridge_test", max_time=200)
    reg = Region.slab_ulbl((1.0, 0.0), 1.0, 3.0)
    ex = sample_exits(BUMPY, reg, 20, cfg, annealed=False, env_index=7, first_traj=100)
    env = Environment(BUMPY, 7)
    for j in range(20):
        rec = first_exit(simulate_trajectory(env, (0.0, 0.0), cfg, 100 + j), reg, cfg.boundary_correction)
        assert rec.exited and ex.status[j] == EXITED
        assert rec.step == ex.steps[j] and rec.side == ex.sides[j]
        np.testing.assert_array_equal(rec.position, ex.positions[j])


def test_worker_count_does_not_change_results():
    cfg = IntegratorConfig(h=0.01, boundary_correction="bridge_test")
    reg = Region.slab_ulbl((1.0, 0.0), 1.0, 2.0)
    farm.set_workers(1)
    a = sample_exits(BUMPY, reg, 1500, cfg)
    farm.set_workers(4)
    b = sample_exits(BUMPY, reg, 1500, cfg)
    farm.set_workers(None)
    for f in ("status", "steps", "sides", "positions"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_timeouts_are_reported():
    cfg = IntegratorConfig(h=0.01, max_time=0.5)
    ex = sample_exits(FLAT1, Region.slab((1.0,), -50.0, 50.0), 10, cfg)
    assert ex.n_censored == 10 and np.all(ex.steps == 50)


def test_step_uses_drift_and_noise():
    env = Environment(EnvironmentSpec(dimension=2, base_drift=(1.0, -1.0), drift_bound=2.0), 0)

    class Fixed:
        def normal(self, size):
            return np.array([0.5, 0.0])

    np.testing.assert_allclose(step(env, (0.0, 0.0), Fixed(), 0.04), [0.04 + 0.1, -0.04])


def test_path_functionals_on_constructed_path():
    path = np.array([0.0, 0.5, 1.0, 0.4, -0.2, -1.1, 0.0, 2.0])
    pf = path_functionals(Trajectory.from_positions(path, 0.25), (1.0,), 1.0)
    np.testing.assert_array_equal(pf.running_max, [0, 0.5, 1, 1, 1, 1, 1, 2])
    assert pf.J == 5 * 0.25 and pf.D == 2.0
    pf2 = path_functionals(Trajectory.from_positions([0.0, 0.3, 0.9], 0.5), (1.0,), 1.0)
    assert pf2.J == math.inf and pf2.D == math.inf


def test_bernstein_bound():
    assert bernstein_bound(1.0, 10.0, 1.0, 1.0, 2) == 1.0
    vals = [bernstein_bound(L, 1.0, 1.0, 1.0, 2) for L in (2, 3, 4, 5)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    L = 4.0
    assert vals[2] == pytest.approx(4 * math.exp(-((16 - 4) ** 2) / (4 * 4)))


def test_displacement_tail_below_bernstein():
    rows = displacement_tail(BUMPY, 1.0, [2.0, 3.0], 2000, IntegratorConfig(h=0.01))
    for r in rows:
        assert r["ci_low"] <= r["bernstein_bound"]


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3))
def test_ball_contains(x, y, r):
    assert Region.ball((0.0, 0.0), r).contains((x, y)) == (x * x + y * y < r * r)
