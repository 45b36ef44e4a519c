"""Experiment runners: each takes a parsed config and an output directory and
returns (files written, censoring summary)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import ballistic, kalikow, regen
from .config import ExperimentConfig
from .io import write_csv, write_json, write_jsonl
from .sde import IntegratorConfig
from .stats import InsufficientDataError

LADDER_COLUMNS = ["direction", "L", "gamma", "depth_ratio", "n", "exit_left", "exit_right", "p_hat", "ci_low",
                  "ci_high", "censored"]


def _ladder_rows(ladder, gammas, tag=0):
    rows = []
    for g in gammas:
        for e in ladder:
            rows.append(dict(direction=tag, **e.row(g)))
    return rows


def run_slab_ladder(cfg: ExperimentConfig, out: Path):
    p = cfg.params
    l = np.asarray(p["l"], float)
    files = []
    if p["n_dirs"] > 0:
        dirs = ballistic.cone_directions(l, p["cone_half_angle"], p["n_dirs"])
    else:
        dirs = l[None, :]
    rows, fits, cens = [], [], 0
    for j, u in enumerate(dirs):
        lad = ballistic.slab_ladder(cfg.env, u, p["depth_ratio"], p["L_ladder"], p["n_traj"], cfg.integ)
        cens += sum(e.censored_count for e in lad)
        rows += _ladder_rows(lad, p["gamma_ladder"], j)
        for g in p["gamma_ladder"]:
            try:
                f = ballistic.fit_condition_T(lad, g)
                fits.append(dict(direction=u.tolist(), gamma=g, slope=f.slope, stderr=f.stderr,
                                 slope_upper=f.slope_upper, verdict=f.verdict))
            except InsufficientDataError as e:  # too few ladder points is reported, not fatal
                fits.append(dict(direction=u.tolist(), gamma=g, verdict=f"refused: {e}"))
        for e in lad:
            if e.censored_warning:
                fits.append(dict(direction=u.tolist(), L=e.slab.L, warning="censored fraction above 5%"))
    write_csv(out / "ladder.csv", rows, LADDER_COLUMNS)
    overall = {}
    for g in p["gamma_ladder"]:
        vs = [f for f in fits if f.get("gamma") == g and "slope" in f]
        overall[str(g)] = bool(vs) and all(f["verdict"].startswith("consistent") for f in vs)
    write_json(out / "fits.json", dict(fits=fits, neighborhood_consistent=overall))
    files += ["ladder.csv", "fits.json"]
    return files, dict(censored_trajectories=cens, total_trajectories=len(dirs) * len(p["L_ladder"]) * p["n_traj"])


def _scan(cfg, n_traj, horizon, tail_margin):
    return regen.regeneration_scan(cfg.env, cfg.coupling, cfg.integ, horizon, n_traj, tail_margin=tail_margin)


def _block_rows(table):
    for r in table.records():
        yield dict(trajectory_index=r.trajectory_index, env_index=r.env_index, k=r.k, tau_k=r.tau_k,
                   block_duration=r.block_duration, sup_displacement=r.sup_displacement, censored=r.censored,
                   **{f"x_tau_{i}": v for i, v in enumerate(r.X_tau_k)},
                   **{f"increment_{i}": v for i, v in enumerate(r.block_increment)})


def run_regeneration(cfg: ExperimentConfig, out: Path):
    p = cfg.params
    res = _scan(cfg, p["n_traj"], p["horizon"], p["tail_margin"])
    t = res.table
    write_jsonl(out / "records.jsonl", (r.to_dict() for r in t.records()))
    write_csv(out / "blocks.csv", _block_rows(t))
    summary = dict(n_traj=p["n_traj"], discarded_bridge_failures=res.n_bridge_failed, overflow=res.n_overflow,
                   uncensored_blocks=int(t.uncensored(1).sum()), censored_blocks=int(t.censored.sum()),
                   tau1_found_fraction=float(t.tau1_confirmed().mean()) if t.n_traj else 0.0)
    try:
        rep = regen.renewal_tests(t, min_blocks=p["min_blocks"], b_bar=cfg.env.drift_bound)
        summary["renewal"] = rep.to_dict()
    except InsufficientDataError as e:
        summary["renewal"] = dict(refused=str(e))
    write_json(out / "renewal.json", summary)
    return ["records.jsonl", "blocks.csv", "renewal.json"], dict(censored_blocks=int(t.censored.sum()),
                                                                 discarded=res.n_bridge_failed)


def run_ballistic_report(cfg: ExperimentConfig, out: Path):
    p = cfg.params
    res = _scan(cfg, p["n_traj"], p["horizon"], p["tail_margin"])
    t = res.table
    files = []
    fits, equiv = [], []
    ladder = None
    if p["L_ladder"] and p["ladder_n"] > 0:
        ladder = ballistic.slab_ladder(cfg.env, p["l"], p["depth_ratio"], p["L_ladder"], p["ladder_n"], cfg.integ)
        write_csv(out / "ladder.csv", _ladder_rows(ladder, p["gamma_ladder"]), LADDER_COLUMNS)
        files.append("ladder.csv")
        for g in p["gamma_ladder"]:
            eq = ballistic.equivalence_check(ladder, t, g)
            f = eq.t_fit
            fits.append(dict(gamma=g, slope=f.slope, stderr=f.stderr, verdict=f.verdict))
            it = eq.integrability
            equiv.append(dict(gamma=g, t_verdict=eq.t_verdict, tau1_verdict=eq.tau_verdict, agree=eq.agree,
                              mu_hat=None if it is None else it.mu_hat, mu_se=None if it is None else it.mu_se,
                              tau1_found_fraction=None if it is None else it.tau1_found_fraction,
                              refusal=eq.refusal))
    trans = []
    if p["transverse_T"] and p["transverse_n"] > 0:
        trans = ballistic.transverse_profile(cfg.env, p["l"], p["transverse_T"], p["transverse_n"], cfg.integ)
    try:
        rep = ballistic.ballistic_statistics(t, min_blocks=p["min_blocks"], gamma_fits=fits, transverse=trans)
        body = rep.to_dict()
    except InsufficientDataError as e:
        body = dict(refused=str(e))
    body["equivalence"] = equiv
    body["discarded_bridge_failures"] = res.n_bridge_failed
    write_json(out / "ballistic.json", body)
    files.append("ballistic.json")
    if "tau1_tail" in body:
        write_csv(out / "tau1_tail.csv", body["tau1_tail"])
        files.append("tau1_tail.csv")
    return files, dict(censored_blocks=int(t.censored.sum()), discarded=res.n_bridge_failed)


def _green_integ(cfg, h=None):
    return IntegratorConfig(h=h or cfg.integ.h, boundary_correction=cfg.integ.boundary_correction,
                            max_time=cfg.integ.max_time)


def _field_rows(fld, green):
    cen = fld.grid.centers()
    g, se = green.g_mean, green.g_se
    for c in range(fld.grid.n_cells):
        if green.g_batch[:, c].sum() == 0:
            continue
        yield dict(**{f"x{i}": float(cen[c, i]) for i in range(fld.grid.d)}, g=float(g[c]), g_se=float(se[c]),
                   **{f"bprime_{i}": float(fld.bprime[c, i]) for i in range(fld.grid.d)},
                   reliable=bool(fld.reliable[c]), margin=bool(fld.margin[c]))


def run_kalikow(cfg: ExperimentConfig, out: Path):
    p = cfg.params
    l = np.asarray(p["l"], float)
    fam = kalikow.domain_family(p["scales"], cfg.env.range, cfg.env.dimension, p["delta"], p["kinds"])
    fields, files, cens = [], [], 0.0
    domains = []
    for j, grid in enumerate(fam):
        g = kalikow.estimate_green(cfg.env, grid, p["n_env"], p["n_traj"], cfg.integ, l=l,
                                   split_factor=p["split_factor"], split_spacing=p["split_spacing"],
                                   split_lateral=p["split_lateral"])
        f = kalikow.auxiliary_drift(cfg.env, g, allow_single_env=True)
        fields.append(f)
        cens += g.censored_weight
        name = f"field_{j}.csv"
        write_csv(out / name, _field_rows(f, g))
        files.append(name)
        domains.append(dict(domain=grid.describe(), mean_exit_time=g.mean_exit_time,
                            mean_exit_time_se=g.mean_exit_time_se, total_occupation=g.total_occupation,
                            censored_weight=g.censored_weight, clones=g.n_clones, file=name))
    rep = kalikow.check_condition_K(fields, l)
    write_json(out / "condition_K.json", dict(domains=domains, verdict=rep.verdict, epsilon_hat=rep.epsilon_hat,
                                              lower_bound=rep.lower_bound,
                                              per_domain=[d.__dict__ for d in rep.domains]))
    files.append("condition_K.json")
    return files, dict(censored_green_weight=cens)


def run_exit_identity(cfg: ExperimentConfig, out: Path):
    p = cfg.params
    l = np.asarray(p["l"], float)
    grid = kalikow.DomainGrid.ball(p["radius"], p["delta"], cfg.env.dimension)
    g = kalikow.estimate_green(cfg.env, grid, p["n_env"], 1, _green_integ(cfg, p["green_h"]), l=l,
                               split_factor=p["split_factor"], split_spacing=p["split_spacing"])
    f = kalikow.auxiliary_drift(cfg.env, g)
    rows = []
    for r in range(p["repeats"]):
        rep = kalikow.exit_law_identity_test(cfg.env, f, p["n"], cfg.integ, seed=r, n_perm=p["n_perm"])
        rows.append(dict(repeat=r, statistic=rep.statistic, p_value=rep.p_value, n_a=rep.n_a, n_b=rep.n_b,
                         censored_a=rep.censored_a, censored_b=rep.censored_b, rejected=rep.rejected))
    write_csv(out / "exit_identity.csv", rows)
    rate = float(np.mean([r["rejected"] for r in rows]))
    write_json(out / "exit_identity.json", dict(rejection_rate=rate, repeats=p["repeats"], alpha=0.01,
                                                reliable_cells=int(f.reliable.sum())))
    return ["exit_identity.csv", "exit_identity.json"], dict(censored=sum(r["censored_a"] + r["censored_b"] for r in rows))


def run_criterion(cfg: ExperimentConfig, out: Path):
    p = cfg.params
    l = np.asarray(p["l"], float)
    integ = _green_integ(cfg, p["green_h"])

    def family(sp):
        return kalikow.domain_family(p["scales"], sp.range, sp.dimension, p["delta"], p["kinds"])

    rep = kalikow.criterion_check(cfg.env, l, p["n_env"], family, p["base_scales"],
                                  dict(integ=integ, split_factor=p["split_factor"], split_spacing=p["split_spacing"]),
                                  moment_envs=p["moment_envs"])
    write_json(out / "criterion.json", rep.__dict__)
    write_csv(out / "criterion_scan.csv", [dict(scale=r["scale"], ratio=r["ratio"], verdict=r["verdict"])
                                           for r in rep.scan], ["scale", "ratio", "verdict"])
    return ["criterion.json", "criterion_scan.csv"], {}


RUNNERS = dict(slab_ladder=run_slab_ladder, regeneration=run_regeneration, ballistic_report=run_ballistic_report,
               kalikow=run_kalikow, exit_identity=run_exit_identity, criterion=run_criterion)
