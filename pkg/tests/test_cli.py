import csv
import hashlib
import json
from pathlib import Path

import pytest

from diffrenv import cli, experiments
from diffrenv.config import parse_config
from diffrenv.env import SpecError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """
[environment]
dimension = 2
base_drift = 0.3, 0.0
master_seed = 5

[integrator]
h = 0.01
boundary_correction = bridge_test

[coupling]
direction = 1, 0

[experiment]
experiment = slab_ladder
L_ladder = 2
n_traj = 100
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_slab_ladder_one_row(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    man = cli.run(cfg, tmp_path / "out", workers=1)
    rows = list(csv.DictReader(open(tmp_path / "out" / "ladder.csv")))
    assert len(rows) == 1 and rows[0]["n"] == "100" and rows[0]["censored"] == "0"
    assert (tmp_path / "out" / "config.cfg").read_text() == MINIMAL
    m = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert m["config_hash"] == hashlib.sha256(MINIMAL.encode()).hexdigest() == man.config_hash
    assert set(m["files"]) == {"config.cfg", "ladder.csv", "fits.json"}
    assert m["censoring"]["censored_trajectories"] == 0


def test_rerun_and_worker_count_give_identical_bytes(tmp_path):
    cfg = write(tmp_path, MINIMAL.replace("L_ladder = 2", "L_ladder = 2, 3, 4").replace("n_traj = 100", "n_traj = 1500"))
    outs = [tmp_path / f"o{w}" for w in (1, 1, 3)]
    for o, w in zip(outs, (1, 1, 3)):
        cli.run(cfg, o, workers=w)
    for f in ("ladder.csv", "fits.json"):
        blobs = {(o / f).read_bytes() for o in outs}
        assert len(blobs) == 1


def test_seed_override_changes_outputs(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    cli.run(cfg, tmp_path / "a", workers=1)
    cli.run(cfg, tmp_path / "b", workers=1, seed_override=99)
    assert (tmp_path / "a" / "ladder.csv").read_bytes() != (tmp_path / "b" / "ladder.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["master_seed"] == 99


def test_validate_reports_every_field(tmp_path):
    bad = MINIMAL.replace("h = 0.01", "h = 0.03").replace("n_traj = 100", "n_traj = 0").replace(
        "direction = 1, 0", "direction = 1, 0\nsuccess_p = 2")
    probs = cli.validate(write(tmp_path, bad))
    assert any(p.startswith("integrator.h") and "1/h" in p for p in probs)
    assert any(p.startswith("experiment.n_traj") for p in probs)
    assert any(p.startswith("coupling.success_p") for p in probs)
    with pytest.raises(SpecError):
        cli.run(write(tmp_path, bad, "b.cfg"), tmp_path / "x")


def test_validate_lipschitz_bound(tmp_path):
    txt = MINIMAL.replace("master_seed = 5", "master_seed = 5\nbump_intensity = 1\ndrift_bound = 20\n"
                          "lipschitz_K = 5\nbump_amplitude_law = uniform_ball: 8")
    probs = cli.validate(write(tmp_path, txt))
    assert len(probs) == 1 and probs[0].startswith("environment.lipschitz_K") and "analytic" in probs[0]


def test_validate_missing_sections_and_unknowns(tmp_path):
    probs = cli.validate(write(tmp_path, "[environment]\nfoo = 1\n"))
    for s in ("[integrator]", "[coupling]", "[experiment]", "environment.foo"):
        assert any(s in p for p in probs)
    assert cli.validate(tmp_path / "missing.cfg")[0].startswith("config:")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    assert cli.validate(path) == []


def test_failure_goes_to_quarantine(tmp_path, monkeypatch):
    def boom(cfg, out):
        (out / "partial.csv").write_text("x\n1\n")
        raise RuntimeError("boom")

    monkeypatch.setitem(experiments.RUNNERS, "slab_ladder", boom)
    with pytest.raises(RuntimeError):
        cli.run(write(tmp_path, MINIMAL), tmp_path / "out")
    q = tmp_path / "out" / "quarantine"
    assert (q / "partial.csv").exists() and (q / "config.cfg").exists()
    assert json.loads((q / "manifest.json").read_text())["status"] == "failed"
    assert not (tmp_path / "out" / "partial.csv").exists()


def test_main_verbs(tmp_path, capsys):
    assert cli.main(["list-experiments"]) == 0
    assert "kalikow" in capsys.readouterr().out
    assert cli.main(["validate", "--config", str(CONFIGS / "nonnestling_T.cfg")]) == 0
    bad = write(tmp_path, MINIMAL.replace("h = 0.01", "h = 0.03"))
    assert cli.main(["validate", "--config", str(bad)]) == 1
    cfg = write(tmp_path, MINIMAL, "ok.cfg")
    assert cli.main(["run", "--config", str(cfg), "--output", str(tmp_path / "o"), "--workers", "2"]) == 0


def test_parse_config_types():
    c = parse_config(MINIMAL)
    assert c.problems == [] and c.env.base_drift == (0.3, 0.0) and c.params["L_ladder"] == (2.0,)
    assert c.params["l"] == (1.0, 0.0) and c.integ.bridge
    assert parse_config(MINIMAL, seed_override=7).env.master_seed == 7
