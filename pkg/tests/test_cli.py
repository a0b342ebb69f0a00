"""Command-line interface: run, oracle-check, volume."""
import numpy as np
import pytest

from cellflow import cli
from cellflow import correction as C
from cellflow.scene import scene_to_text, builtin_scene

from conftest import random_problem


def test_run_builtin(tmp_path, capsys):
    out = tmp_path / "mini"
    code = cli.main(["run", "dam", "--out", str(out), "--frames", "2", "--seed", "3"])
    assert code == 0
    assert (out / "volume.csv").exists()
    assert (out / "frame_000002.cprt").exists()
    assert "run complete" in capsys.readouterr().out


def test_run_config_file(tmp_path):
    from cellflow.scene import Box, FluidRegion, SceneConfig
    cfg = SceneConfig(name="tiny", dims=(20, 20), mu=2, frames=1,
                      fluids=[FluidRegion(Box((1, 1), (10, 8)))])
    path = tmp_path / "tiny.scene"
    path.write_text(scene_to_text(cfg), encoding="utf-8")
    code = cli.main(["run", str(path), "--out", str(tmp_path / "out")])
    assert code == 0


def test_run_band_flags(tmp_path):
    code = cli.main(["run", "dam", "--out", str(tmp_path / "b"), "--frames", "1",
                     "--band", "3", "--strategy", "flow"])
    assert code == 0


def test_run_unknown_scene(tmp_path, capsys):
    code = cli.main(["run", "nope", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_oracle_check_ok(tmp_path, rng, capsys):
    problem, grid, particles = random_problem(rng, n_max=6)
    dump = tmp_path / "problem.txt"
    dump.write_text(C.dump_problem(problem), encoding="utf-8")
    code = cli.main(["oracle-check", str(dump)])
    out = capsys.readouterr().out
    assert code == 0
    assert "OK" in out


def test_oracle_check_large_instance(tmp_path, capsys):
    rng = np.random.default_rng(99)
    problem = None
    while problem is None or problem.n < 7:
        problem, grid, particles = random_problem(rng, dims=(10, 10), n_max=10)
    # widen beyond the brute-force limit by doubling particles
    import cellflow.correction as CC
    t = problem.candidates
    wide = CC.CandidateTable(
        xi=np.concatenate([t.xi, t.xi], axis=1),
        cost=np.concatenate([t.cost, t.cost], axis=1),
        target_flat=np.concatenate([t.target_flat, t.target_flat], axis=1),
        valid=np.concatenate([t.valid, t.valid], axis=1),
        dirs=t.dirs)
    big = CC.CorrectionProblem(
        candidates=wide, mu=problem.mu,
        cap=np.where(problem.cap >= 0, problem.cap * 2, problem.cap),
        floor=problem.floor * 2,
        cost=np.concatenate([problem.cost, problem.cost], axis=1), dims=problem.dims)
    dump = tmp_path / "big.txt"
    dump.write_text(C.dump_problem(big), encoding="utf-8")
    code = cli.main(["oracle-check", str(dump)])
    assert code == 0
    assert "too large for brute force" in capsys.readouterr().out


def test_volume_summary(tmp_path, capsys):
    out = tmp_path / "v"
    cli.main(["run", "dam", "--out", str(out), "--frames", "2"])
    capsys.readouterr()
    code = cli.main(["volume", str(out)])
    text = capsys.readouterr().out
    assert code == 0
    assert "volume percent range" in text
    assert "100.00" in text
