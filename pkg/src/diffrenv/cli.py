"""Command-line runner: ``diffrenv run|validate|list-experiments``."""
from __future__ import annotations

import argparse
import shutil
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__, farm
from .config import EXPERIMENTS, ExperimentConfig, load_config
from .env import SpecError
from .io import write_json


@dataclass
class RunManifest:
    config_hash: str
    version: str
    experiment: str
    master_seed: int
    wall_time: float
    files: list
    censoring: dict
    status: str = "ok"
    error: str | None = None
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def validate(path, seed_override=None) -> list[str]:
    """Every failing field of the config; empty when it is valid."""
    try:
        cfg = load_config(path, seed_override)
    except SpecError as e:
        return list(e.problems)
    except OSError as e:
        return [f"config: cannot read ({e})"]
    return list(cfg.problems)


def run(path, output=None, workers=None, seed_override=None) -> RunManifest:
    """Run the configured experiment and write outputs, the config copy and the manifest.

    Statistical outputs depend only on the config text and the version; the
    wall time and worker count appear in the manifest only.  On failure the
    partial outputs are moved to ``<output>/quarantine/``.
    """
    from .experiments import RUNNERS

    path = Path(path)
    cfg: ExperimentConfig = load_config(path, seed_override)
    if cfg.problems:
        raise SpecError(cfg.problems)
    out = Path(output or cfg.output)
    w = workers or cfg.workers
    farm.set_workers(w)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.text)
    t0 = time.perf_counter()
    try:
        files, cens = RUNNERS[cfg.experiment](cfg, out)
    except Exception as e:
        q = out / "quarantine"
        q.mkdir(exist_ok=True)
        for p in out.iterdir():
            if p.name != "quarantine":
                shutil.move(str(p), q / p.name)
        man = RunManifest(cfg.config_hash, __version__, cfg.experiment, cfg.master_seed,
                          time.perf_counter() - t0, [], {}, "failed", f"{type(e).__name__}: {e}", farm.get_workers())
        write_json(q / "manifest.json", man.to_dict())
        (q / "traceback.txt").write_text(traceback.format_exc())
        raise
    finally:
        farm.set_workers(None)
    man = RunManifest(cfg.config_hash, __version__, cfg.experiment, cfg.master_seed, time.perf_counter() - t0,
                      ["config.cfg"] + list(files), cens, workers=w or farm.default_workers())
    write_json(out / "manifest.json", man.to_dict())
    return man


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="diffrenv", description="diffusions in random environments: experiments")
    ap.add_argument("verb", choices=["run", "validate", "list-experiments"])
    ap.add_argument("--config", help="experiment config file")
    ap.add_argument("--workers", type=int, default=None, help="worker threads (default: all cores)")
    ap.add_argument("--output", default=None, help="output directory (default: from config)")
    ap.add_argument("--seed-override", type=lambda s: int(s, 0), default=None, help="replace master_seed")
    a = ap.parse_args(argv)
    if a.verb == "list-experiments":
        for k, v in EXPERIMENTS.items():
            print(f"{k:18s} {v}")
        return 0
    if not a.config:
        ap.error("--config is required")
    if a.workers is not None and a.workers <= 0:
        ap.error("--workers must be positive")
    if a.verb == "validate":
        probs = validate(a.config, a.seed_override)
        for p in probs:
            print(p)
        if not probs:
            print("ok")
        return 1 if probs else 0
    try:
        man = run(a.config, a.output, a.workers, a.seed_override)
    except SpecError as e:
        for p in e.problems:
            print(p, file=sys.stderr)
        return 2
    except Exception as e:
        print(f"run failed: {type(e).__name__}: {e} (partial outputs in quarantine/)", file=sys.stderr)
        return 3
    print(f"{man.experiment}: {len(man.files)} files, {man.wall_time:.1f} s, config {man.config_hash[:12]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
