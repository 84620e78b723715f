import csv
import json

import pytest

from simce import cli
from simce import experiments as ex

SMALL = """seed = 2
[geometry]
num_atoms = 8
num_antennas = 2
num_layers = 2
[pilot]
effective_snr_db = 10.0
[estimator]
max_iters = 10
num_restarts = 2
codebook_size = 10
[monte_carlo]
trials = 100
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def test_design_then_evaluate(tmp_path, config, capsys):
    out = tmp_path / "out"
    assert cli.main(["design", "-c", str(config), "-o", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["scheme"] == "SIM-Optimized"
    artifact = out / "design.json"
    assert artifact.exists()
    assert cli.main(["evaluate", str(artifact), "-o", str(out), "--trials", "300"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["closed_form_nmse"] == pytest.approx(summary["average_nmse"], rel=1e-12)
    assert abs(ev["empirical_nmse"] - ev["closed_form_nmse"]) <= 4 * ev["empirical_se"]
    rows = list(csv.DictReader((out / "evaluation.csv").open()))
    assert len(rows) == 4


def test_codebook_design(tmp_path, config, capsys):
    assert cli.main(["design", "-c", str(config), "-o", str(tmp_path),
                     "--scheme", "SIM-Codebook", "--name", "cb.json"]) == 0
    assert json.loads(capsys.readouterr().out)["scheme"] == "SIM-Codebook"


def test_dry_run(config, tmp_path):
    assert cli.main(["design", "-c", str(config), "--dry-run", "-o", str(tmp_path)]) == 0
    assert not (tmp_path / "design.json").exists()


def test_configuration_errors_exit_1(tmp_path, caplog):
    bad = tmp_path / "bad.toml"
    bad.write_text("[geometry]\nnum_layers = 0\n")
    assert cli.main(["design", "-c", str(bad)]) == 1
    assert "geometry.num_layers" in caplog.text
    bad.write_text("[geometry\n")
    assert cli.main(["design", "-c", str(bad)]) == 1
    assert cli.main(["design", "-c", str(tmp_path / "missing.toml")]) == 1
    assert cli.main(["design", "--scheme", "SIM-Optimized-LowRank", "--dry-run"]) == 1
    good = tmp_path / "lr.toml"
    good.write_text("[estimator]\nlow_rank_threshold = 0.99\n")
    assert cli.main(["design", "--scheme", "SIM-Optimized-LowRank", "--dry-run",
                     "-c", str(good)]) == 0


def _grid_config(tmp_path):
    path = tmp_path / "grid.toml"
    path.write_text(SMALL + '[grid]\nname = "g"\neffective_snr_db = [0.0, 10.0]\n'
                    'scheme = ["SIM-Optimized", "Conventional"]\n')
    return path


def test_grid_command_and_determinism(tmp_path, capsys):
    path = _grid_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["grid", "-c", str(path), "-o", str(a)]) == 0
    assert cli.main(["grid", "-c", str(path), "-o", str(b), "-j", "2"]) == 0
    assert (a / "g_results.csv").read_bytes() == (b / "g_results.csv").read_bytes()
    assert "Conventional" in capsys.readouterr().out
    assert cli.main(["grid", "-c", str(path), "-o", str(a), "--dry-run"]) == 0


def test_grid_partial_failure_exit_2(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("nope")

    monkeypatch.setattr(ex, "design_estimator", boom)
    assert cli.main(["grid", "-c", str(_grid_config(tmp_path)), "-o", str(tmp_path)]) == 2
    rows = list(csv.DictReader((tmp_path / "g_results.csv").open()))
    assert [bool(r["error"]) for r in rows] == [True, False, True, False]


def test_internal_error_exit_3(tmp_path, config, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("bug")

    monkeypatch.setattr(cli, "design_estimator", boom)
    assert cli.main(["design", "-c", str(config), "-o", str(tmp_path)]) == 3


def test_figure_from_results(tmp_path):
    path = _grid_config(tmp_path)
    assert cli.main(["grid", "-c", str(path), "-o", str(tmp_path)]) == 0
    out = tmp_path / "fig"
    # a two-SNR grid covers only part of the preset, so gaps are reported
    code = cli.main(["figure", "fig2", "--from-results", str(tmp_path / "g_results.csv"),
                     "-o", str(out)])
    assert code == 2
    manifest = json.loads((out / "fig2_manifest.json").read_text())
    assert manifest["gaps"]


def test_figure_dry_run(tmp_path):
    assert cli.main(["figure", "fig4", "--dry-run", "-o", str(tmp_path)]) == 0


def test_bad_workers():
    with pytest.raises(SystemExit):
        cli.main(["grid", "-j", "0"])
