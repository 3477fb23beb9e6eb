import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from ensbench.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from ensbench.fileio import read_fields
from ensbench.grid import GridSpec
from ensbench.model import EnsembleForecast, load_checkpoint, save_checkpoint, save_ensembles

SMOKE = str(resources.files("ensbench") / "configs" / "smoke.json")
STEPS = ["gen-data", "train", "forecast", "verify", "track", "report"]


def run(cmd, workdir, *extra):
    return main([cmd, "--config", SMOKE, "--workdir", str(workdir), *extra])


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    wd = tmp_path_factory.mktemp("smoke")
    for cmd in STEPS:
        assert run(cmd, wd) == EXIT_OK, cmd
    return wd


def test_artifacts_exist(smoke):
    for rel in ["data/frames.ensf", "data/frames.json", "data/vortex/cases.json", "data/vortex/best_track.csv",
                "model/checkpoint.ensc", "model/loss_curve.csv", "forecast/forecasts.ense",
                "verify/metrics.csv", "verify/metrics.json", "verify/climatology.ensf",
                "track/tracks.csv", "track/tracks.json", "track/track_stats.json", "track/track_metrics.csv",
                "report/report.csv", "report/report.json"]:
        assert (smoke / rel).exists(), rel


def test_outputs_carry_hash_and_seed(smoke):
    from ensbench.config import load_config
    cfg = load_config(SMOKE)
    for rel in ["model/loss_curve.csv", "verify/metrics.csv", "track/tracks.csv", "report/report.csv",
                "track/track_metrics.csv"]:
        head = (smoke / rel).read_text().splitlines()[0]
        assert f"config_hash={cfg.hash}" in head and f"seed={cfg.seed}" in head, rel
    for rel in ["data/frames.json", "verify/metrics.json", "track/tracks.json", "track/track_stats.json"]:
        meta = json.loads((smoke / rel).read_text())
        meta = meta.get("meta", meta)
        assert meta["config_hash"] == cfg.hash and meta["seed"] == cfg.seed, rel
    _, head = load_checkpoint(smoke / "model/checkpoint.ensc")
    assert head["meta"]["config_hash"] == cfg.hash


def test_report_self_comparison_zero(smoke):
    rows = json.loads((smoke / "report/report.json").read_text())["scores"]["x"]
    nd = [v for lead in rows.values() for k, v in lead.items() if k.startswith("nd_")]
    assert nd and all(v == 0.0 for v in nd)


def test_self_verification_zero(smoke, tmp_path):
    grid, frames = read_fields(smoke / "data/frames.ensf")
    meta = json.loads((smoke / "data/frames.json").read_text())
    lo, _ = meta["split"]["test"]
    fcs = [EnsembleForecast(np.repeat(frames[None, ic + 2:ic + 5, None], 3, axis=0), grid, ic + 1,
                            channel_names=("x",)) for ic in (lo, lo + 3)]
    save_ensembles(tmp_path / "perfect.ense", fcs)
    assert run("verify", smoke, "--forecast", str(tmp_path / "perfect.ense")) == EXIT_OK
    scores = json.loads((smoke / "verify/metrics.json").read_text())["scores"]["x"]
    for lead in scores.values():
        assert lead["rmse"] == 0.0 and lead["crps"] == 0.0
        assert all(v == 0.0 for k, v in lead.items() if k.startswith("bs_"))
    # restore the regular metrics for other tests
    assert run("verify", smoke) == EXIT_OK


def test_grid_mismatch_exit_3(smoke, tmp_path, capsys):
    wrong = GridSpec(1, 40, 0.0, 1.0, 0.0, 4.5)
    save_ensembles(tmp_path / "wrong.ense", [EnsembleForecast(np.zeros((2, 3, 1, 1, 40)), wrong, 100)])
    capsys.readouterr()
    assert run("verify", smoke, "--forecast", str(tmp_path / "wrong.ense")) == EXIT_DATA
    err = capsys.readouterr().err
    grid, _ = read_fields(smoke / "data/frames.ensf")
    assert wrong.describe() in err and grid.describe() in err


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("gen-data", tmp_path, "--set", "train.lamda=1") == EXIT_CONFIG
    assert "train.lamda" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--workdir", str(tmp_path)]) == EXIT_CONFIG
    assert run("gen-data", tmp_path, "--jobs", "0") == EXIT_CONFIG


def test_missing_input_exit_3(tmp_path, capsys):
    assert run("train", tmp_path) == EXIT_DATA
    assert "frames.ensf" in capsys.readouterr().err


def test_numeric_fault_exit_4(smoke, tmp_path, capsys):
    params, head = load_checkpoint(smoke / "model/checkpoint.ensc")
    params.arrays["F.dec_b"][:] = np.inf
    save_checkpoint(tmp_path / "bad.ensc", params)
    code = run("forecast", smoke, "--checkpoint", str(tmp_path / "bad.ensc"), "--out", str(tmp_path / "f.ense"))
    assert code == EXIT_NUMERIC
    assert "F.dec_b" in capsys.readouterr().err


def _snapshot(wd: Path):
    return {str(p.relative_to(wd)): p.read_bytes() for p in sorted(wd.rglob("*")) if p.is_file()}


def test_rerun_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for wd in (a, b):
        for cmd in STEPS:
            assert run(cmd, wd) == EXIT_OK
    sa, sb = _snapshot(a), _snapshot(b)
    assert sa.keys() == sb.keys()
    assert [k for k in sa if sa[k] != sb[k]] == []


def test_parallel_matches_serial(smoke, tmp_path):
    import shutil
    par = tmp_path / "par"
    shutil.copytree(smoke, par)
    assert run("forecast", par, "--jobs", "2") == EXIT_OK
    assert run("track", par, "--jobs", "2") == EXIT_OK
    for rel in ["forecast/forecasts.ense", "track/tracks.csv", "track/track_stats.json"]:
        assert (par / rel).read_bytes() == (smoke / rel).read_bytes(), rel


def test_seed_flag_changes_outputs(tmp_path):
    assert run("gen-data", tmp_path / "s1") == EXIT_OK
    assert run("gen-data", tmp_path / "s2", "--seed", "99") == EXIT_OK
    assert (tmp_path / "s1/data/frames.ensf").read_bytes() != (tmp_path / "s2/data/frames.ensf").read_bytes()


def test_console_script(tmp_path):
    exe = Path(sys.executable).with_name("ensbench")
    cmd = [str(exe)] if exe.exists() else [sys.executable, "-m", "ensbench.cli"]
    out = subprocess.run(cmd + ["gen-data", "--config", SMOKE, "--workdir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    out = subprocess.run(cmd + ["bogus"], capture_output=True, text=True)
    assert out.returncode == 2


def test_workdir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ENSBENCH_DATA_DIR", str(tmp_path / "envdir"))
    assert main(["gen-data", "--config", SMOKE]) == EXIT_OK
    assert (tmp_path / "envdir/data/frames.ensf").exists()
