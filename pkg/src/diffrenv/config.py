"""Sectioned key-value run configuration.

Sections: [environment] (EnvironmentSpec fields), [integrator], [coupling]
and [experiment] (experiment name plus its parameters).  Lists are comma
separated; amplitude laws use the ``kind: args`` syntax of AmplitudeLaw.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .env import AmplitudeLaw, EnvironmentSpec, SpecError
from .regen import CouplingConfig
from .sde import IntegratorConfig

EXPERIMENTS = {
    "slab_ladder": "annealed slab exit probabilities over an L ladder and (T)_gamma fits",
    "regeneration": "regeneration scan of coupled trajectories and renewal tests",
    "ballistic_report": "velocity, CLT covariance, tau_1 tail and the (T)/tau_1 equivalence check",
    "kalikow": "Green functions, auxiliary drift and condition (K) on a domain family",
    "exit_identity": "exit law of the annealed process against the auxiliary diffusion",
    "criterion": "drift-sign moments and the empirical c_e scan",
}

# experiment parameter -> (type, default); None default means required
PARAMS = {
    "common": dict(l=("floats", None)),
    "slab_ladder": dict(depth_ratio=("float", 1.0), L_ladder=("floats", None), gamma_ladder=("floats", "1.0"),
                        n_traj=("int", None), cone_half_angle=("float", 0.0), n_dirs=("int", 0)),
    "regeneration": dict(n_traj=("int", None), horizon=("float", None), tail_margin=("float", 50.0),
                         min_blocks=("int", 200)),
    "ballistic_report": dict(n_traj=("int", None), horizon=("float", None), tail_margin=("float", 50.0),
                             gamma_ladder=("floats", "1.0"), L_ladder=("floats", ""), depth_ratio=("float", 1.0),
                             ladder_n=("int", 0), transverse_T=("floats", ""), transverse_n=("int", 0),
                             min_blocks=("int", 200)),
    "kalikow": dict(scales=("floats", None), kinds=("strs", "ball,box"), delta=("float", 0.25), n_env=("int", None),
                    n_traj=("int", 1), split_factor=("int", 1), split_spacing=("float", 1.0),
                    split_lateral=("float", 0.0)),
    "exit_identity": dict(radius=("float", None), n=("int", None), n_env=("int", None), delta=("float", 0.25),
                          repeats=("int", 1), n_perm=("int", 199), split_factor=("int", 1),
                          split_spacing=("float", 1.0), green_h=("float", 0.05)),
    "criterion": dict(scales=("floats", None), kinds=("strs", "ball,box"), base_scales=("floats", ""),
                      delta=("float", 0.25), n_env=("int", None), moment_envs=("int", 20000),
                      split_factor=("int", 1), split_spacing=("float", 1.0), green_h=("float", 0.05)),
}


def _floats(s: str) -> tuple:
    s = s.strip()
    return tuple(float(v) for v in s.split(",")) if s else ()


def _convert(kind, raw):
    if kind == "float":
        return float(raw)
    if kind == "int":
        return int(raw)
    if kind == "floats":
        return _floats(raw)
    if kind == "strs":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    return raw


@dataclass
class ExperimentConfig:
    experiment: str
    env: EnvironmentSpec
    integ: IntegratorConfig
    coupling: CouplingConfig
    params: dict
    text: str
    output: str = "results"
    workers: int | None = None
    problems: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    @property
    def master_seed(self) -> int:
        return self.env.master_seed


def _section(cp, name, problems):
    if not cp.has_section(name):
        problems.append(f"[{name}]: section missing")
        return {}
    return dict(cp.items(name))


def parse_config(text: str, seed_override: int | None = None) -> ExperimentConfig:
    """Parse a config; every offending field is collected in ``problems``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    problems = []
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise SpecError([f"config syntax: {e}"]) from None
    env_raw = _section(cp, "environment", problems)
    int_raw = _section(cp, "integrator", problems)
    cpl_raw = _section(cp, "coupling", problems)
    exp_raw = _section(cp, "experiment", problems)

    env_kw = {}
    known = {f.name: f for f in fields(EnvironmentSpec)}
    for k, v in env_raw.items():
        if k not in known:
            problems.append(f"environment.{k}: unknown field")
            continue
        try:
            if k == "bump_amplitude_law":
                env_kw[k] = AmplitudeLaw.parse(v)
            elif k == "base_drift":
                env_kw[k] = _floats(v)
            elif k in ("dimension", "master_seed"):
                env_kw[k] = int(v, 0)
            elif k == "sigma_mode":
                env_kw[k] = v.strip()
            else:
                env_kw[k] = float(v)
        except (ValueError, SpecError) as e:
            problems.append(f"environment.{k}: cannot parse {v!r} ({e})")
    if seed_override is not None:
        env_kw["master_seed"] = int(seed_override)
    env = EnvironmentSpec(**env_kw)
    problems += [f"environment.{p}" for p in env.problems()]

    int_kw = {}
    for k, v in int_raw.items():
        try:
            if k == "h":
                int_kw[k] = float(v)
            elif k == "max_time":
                int_kw[k] = float(v)
            elif k == "boundary_correction":
                int_kw[k] = v.strip()
            elif k == "noise":
                int_kw[k] = v.strip().lower() in ("1", "true", "yes", "on")
            else:
                problems.append(f"integrator.{k}: unknown field")
        except ValueError:
            problems.append(f"integrator.{k}: cannot parse {v!r}")
    integ = IntegratorConfig(**int_kw)
    problems += [f"integrator.{p}" for p in integ.problems()]

    cpl_kw = {}
    for k, v in cpl_raw.items():
        try:
            if k == "direction":
                cpl_kw[k] = _floats(v)
            elif k == "success_p":
                cpl_kw[k] = float(v)
            elif k == "mode":
                cpl_kw[k] = v.strip()
            elif k == "bridge_max_rejects":
                cpl_kw[k] = int(v)
            else:
                problems.append(f"coupling.{k}: unknown field")
        except ValueError:
            problems.append(f"coupling.{k}: cannot parse {v!r}")
    coupling = CouplingConfig(**cpl_kw)
    problems += [f"coupling.{p}" for p in coupling.problems()]
    if len(coupling.direction) != env.dimension:
        problems.append("coupling.direction: length differs from environment.dimension")

    name = exp_raw.pop("experiment", None)
    output = exp_raw.pop("output", "results")
    workers = exp_raw.pop("workers", None)
    params = {}
    if name is None:
        problems.append("experiment.experiment: missing")
    elif name not in EXPERIMENTS:
        problems.append(f"experiment.experiment: unknown experiment {name!r}")
    else:
        spec = dict(PARAMS["common"], **PARAMS[name])
        for k, v in exp_raw.items():
            if k not in spec:
                problems.append(f"experiment.{k}: unknown parameter for {name}")
                continue
            try:
                params[k] = _convert(spec[k][0], v)
            except ValueError:
                problems.append(f"experiment.{k}: cannot parse {v!r}")
        for k, (kind, default) in spec.items():
            if k in params:
                continue
            if default is None:
                if k == "l":
                    params[k] = tuple(coupling.direction)
                else:
                    problems.append(f"experiment.{k}: required")
            else:
                params[k] = _convert(kind, default) if isinstance(default, str) else default
        for k, v in params.items():
            if k in ("n_traj", "n_env", "n", "repeats", "ladder_n", "moment_envs") and isinstance(v, int) and v <= 0:
                if not (k == "ladder_n" and v == 0):
                    problems.append(f"experiment.{k}: must be positive")
            if k == "horizon" and v <= 0:
                problems.append("experiment.horizon: must be positive")
        if "l" in params and len(params["l"]) != env.dimension:
            problems.append("experiment.l: length differs from environment.dimension")
    if workers is not None:
        try:
            workers = int(workers)
            if workers <= 0:
                problems.append("experiment.workers: must be positive")
        except ValueError:
            problems.append(f"experiment.workers: cannot parse {workers!r}")
    return ExperimentConfig(name or "", env, integ, coupling, params, text, output, workers, problems)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), seed_override)
