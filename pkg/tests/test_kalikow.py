import math

import numpy as np
import pytest

from diffrenv.env import AmplitudeLaw, Environment, EnvironmentSpec
from diffrenv.kalikow import (AuxiliaryDriftField, DomainGrid, auxiliary_drift, auxiliary_exits, check_condition_K,
                              criterion_check, criterion_margin, domain_family, estimate_green, exit_law_identity_test,
                              green_envelope)
from diffrenv.sde import IntegratorConfig
from diffrenv.stats import InsufficientDataError

FLAT1 = EnvironmentSpec(dimension=1, base_drift=(0.0,), drift_bound=1.0)
BUMPY = EnvironmentSpec(dimension=2, base_drift=(0.4, 0.0), drift_bound=2.0, lipschitz_K=50, bump_intensity=0.8,
                        bump_amplitude_law=AmplitudeLaw.parse("uniform_ball: 0.5"), master_seed=4)


def test_grid_geometry():
    g = DomainGrid.ball(3.0, 0.25, 2)
    cen = g.centers()
    assert g.n_cells == len(cen) == 25 * 25
    for c in (0, 17, 300, g.n_cells - 1):
        assert g.cell_of(cen[c]) == c
    assert g.cell_of((100.0, 0.0)) == -1
    np.testing.assert_allclose(cen[g.cell_of((0.0, 0.0))], 0.0)
    m = g.margin(0.5)
    assert np.all(g.dist_to_boundary()[m] > 2.5)
    fam = domain_family([4, 8], 1.0, 2, 0.25)
    assert [f.describe() for f in fam] == ["ball(r=2)", "box(-2..2,-2..2)", "ball(r=4)", "box(-4..4,-4..4)"]
    with pytest.raises(ValueError):
        DomainGrid.ball(1.0, 0.25, 2, center=(5.0, 0.0))


def test_green_one_dimensional_profile():
    # killed Brownian motion on (-1/2, 1/2) from 0: g(0, y) = 1/2 - |y|
    grid = DomainGrid.box([-0.5], [0.5], 0.05)
    g = estimate_green(FLAT1, grid, 4000, integ=IntegratorConfig(h=5e-4))
    cen = grid.centers()[:, 0]
    inside = grid.inside()
    for c in np.flatnonzero(inside & (np.abs(cen) > 0.04) & (np.abs(cen) < 0.45)):
        exact = 0.5 - abs(cen[c])
        assert abs(g.g_mean[c] - exact) < 5 * g.g_se[c] + 0.02
    assert abs(g.mean_exit_time - 0.25) < 5 * g.mean_exit_time_se
    assert g.total_occupation == pytest.approx(g.mean_exit_time, rel=1e-9)


def test_green_deterministic_and_batch_layout():
    grid = DomainGrid.ball(2.0, 0.25, 2)
    a = estimate_green(BUMPY, grid, 64, integ=IntegratorConfig(h=0.05))
    b = estimate_green(BUMPY, grid, 64, integ=IntegratorConfig(h=0.05))
    assert np.array_equal(a.g_batch, b.g_batch) and np.array_equal(a.gb_batch, b.gb_batch)
    assert a.g_batch.shape[0] == 32 and a.paths_per_batch.sum() == 64


def test_green_rejects_coarse_grid():
    with pytest.raises(ValueError):
        estimate_green(BUMPY, DomainGrid.ball(2.0, 0.5, 2), 4)


def test_splitting_preserves_the_mean():
    grid = DomainGrid.ball(3.0, 0.25, 2)
    integ = IntegratorConfig(h=0.05)
    plain = estimate_green(BUMPY, grid, 3000, integ=integ)
    split = estimate_green(BUMPY, grid, 3000, integ=integ, l=(1.0, 0.0), split_factor=2, split_spacing=0.5)
    z = (split.mean_exit_time - plain.mean_exit_time) / math.hypot(split.mean_exit_time_se, plain.mean_exit_time_se)
    assert abs(z) < 4
    assert split.n_clones > 0


def test_single_environment_reproduces_the_field():
    grid = DomainGrid.ball(3.0, 0.25, 2)
    g = estimate_green(BUMPY, grid, 1, n_traj=200, integ=IntegratorConfig(h=0.05))
    with pytest.raises(ValueError):
        auxiliary_drift(BUMPY, g)
    f = auxiliary_drift(BUMPY, g, allow_single_env=True)
    env = Environment(BUMPY, 0)
    cen = grid.centers()
    rel = np.flatnonzero(f.reliable)
    assert len(rel) > 50
    np.testing.assert_allclose(f.bprime[rel], env.drift_many(cen[rel]), rtol=1e-12, atol=1e-14)


def test_deterministic_field_gives_base_drift():
    sp = EnvironmentSpec(dimension=2, base_drift=(0.3, -0.1))
    grid = DomainGrid.ball(3.0, 0.25, 2)
    f = auxiliary_drift(sp, estimate_green(sp, grid, 200, integ=IntegratorConfig(h=0.05)))
    np.testing.assert_allclose(f.bprime[f.reliable], np.tile([0.3, -0.1], (f.reliable.sum(), 1)), rtol=1e-12)
    assert f.at((0.0, 0.0)).tolist() == [0.0, 0.0]


def test_condition_K_verdicts():
    l = (1.0, 0.0)
    big = DomainGrid.ball(8.0, 0.25, 2)
    pos = AuxiliaryDriftField.constant(big, (0.2, 0.5), 1.0)
    neg = AuxiliaryDriftField.constant(big, (-0.1, 0.0), 1.0)
    tiny = AuxiliaryDriftField.constant(DomainGrid.ball(4.0, 0.25, 2), (0.2, 0.0), 1.0)
    r = check_condition_K([pos, tiny], l)
    assert r.verdict == "holds" and r.epsilon_hat == pytest.approx(0.2)
    assert r.domains[1].verdict == "vacuous"
    assert check_condition_K([pos, neg], l).verdict == "fails"
    assert check_condition_K([tiny], l).verdict == "vacuous"
    holes = AuxiliaryDriftField(pos.grid, pos.bprime, pos.reliable & (np.arange(big.n_cells) % 7 != 0), pos.margin)
    assert check_condition_K([holes], l).verdict == "inconclusive"


def test_filled_field_copies_nearest_reliable():
    grid = DomainGrid.ball(3.0, 0.25, 2)
    f = AuxiliaryDriftField.constant(grid, (1.0, 0.0), 1.0)
    f.bprime[:, 0] = np.arange(grid.n_cells)
    f.reliable[:] = False
    f.reliable[grid.cell_of((0.0, 0.0))] = True
    filled = f.filled()
    assert np.all(filled[:, 0] == grid.cell_of((0.0, 0.0)))
    f.reliable[:] = False
    with pytest.raises(InsufficientDataError):
        f.filled()


def test_green_envelope_drift_free_ball():
    sp = EnvironmentSpec(dimension=2, base_drift=(0.0, 0.0))
    g = estimate_green(sp, DomainGrid.ball(2.0, 0.25, 2), 4000, integ=IntegratorConfig(h=0.01))
    alpha, c, viol, n = green_envelope(g)
    # 2-d Green function of B_r: (1/pi) log(r/|z|); the envelope slope is close to 1/pi
    assert 0.5 / math.pi < alpha < 2.0 / math.pi
    assert viol <= 0.05 * n


def test_auxiliary_exits_constant_field():
    grid = DomainGrid.ball(2.0, 0.25, 2)
    f = AuxiliaryDriftField.constant(grid, (0.0, 0.0), 1.0)
    st, steps, pos = auxiliary_exits(f, 2000, IntegratorConfig(h=0.01), seed=0)
    assert np.all(st == 1)
    ang = np.arctan2(pos[:, 1], pos[:, 0])
    from scipy.stats import kstest
    assert kstest((ang + np.pi) / (2 * np.pi), "uniform").pvalue > 0.001
    # mean exit time of B_2 is r^2 / d = 2
    assert abs(steps.mean() * 0.01 - 2.0) < 5 * steps.std() * 0.01 / math.sqrt(2000) + 0.05


def test_exit_identity_deterministic_field():
    sp = EnvironmentSpec(dimension=2, base_drift=(0.5, 0.0))
    grid = DomainGrid.ball(3.0, 0.25, 2)
    f = auxiliary_drift(sp, estimate_green(sp, grid, 100, integ=IntegratorConfig(h=0.05)))
    rep = exit_law_identity_test(sp, f, 1000, IntegratorConfig(h=0.02), seed=0, n_perm=99)
    assert rep.p_value > 0.01 and rep.censored_a == rep.censored_b == 0


def test_criterion_non_nestling_is_vacuous():
    sp = EnvironmentSpec(dimension=2, base_drift=(0.5, 0.0))
    rep = criterion_check(sp, (1.0, 0.0), 10, moment_envs=100)
    assert rep.mean_minus == 0 and "vacuously" in rep.verdict
    assert criterion_margin(0.3, 0.05, 5.0) == pytest.approx(0.05)


def test_non_nestling_field_stays_above_delta():
    # b'.l is a ratio of means of values b.l >= 0.55, hence >= 0.55 and |b'| <= b_bar
    sp = EnvironmentSpec(dimension=2, base_drift=(0.55, 0.0), drift_bound=2.0, lipschitz_K=30, bump_intensity=0.4,
                         bump_amplitude_law=AmplitudeLaw.parse("uniform_box: 0, -0.4 | 0.4, 0.4"), master_seed=1)
    f = auxiliary_drift(sp, estimate_green(sp, DomainGrid.ball(3.0, 0.25, 2), 200, integ=IntegratorConfig(h=0.05)))
    b = f.bprime[f.reliable]
    assert len(b) > 50
    assert b[:, 0].min() >= 0.55 - 1e-12
    assert np.linalg.norm(b, axis=1).max() <= 2.0 + 1e-12
