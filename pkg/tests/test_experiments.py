import csv
import json

import pytest

from simce import experiments as ex
from simce.errors import ConfigurationError

FIXED = {"geometry": {"num_antennas": 2, "num_layers": 2},
         "estimator": {"max_iters": 15, "num_restarts": 2, "codebook_size": 20}}


def small_grid(tmp_path=None, **kw):
    axes = kw.pop("axes", {"effective_snr_db": [0.0, 10.0], "N": [8],
                           "scheme": ["SIM-Optimized", "SIM-Codebook", "Conventional"]})
    return ex.ExperimentGrid(axes=axes, fixed=FIXED, trials=200, seed=3,
                             output_dir=str(tmp_path) if tmp_path else None, **kw)


def test_cells_in_lexicographic_axis_order():
    grid = ex.ExperimentGrid(axes={"scheme": ["Conventional"],
                                   "N": [8, 16], "effective_snr_db": [0, 10]})
    cells = grid.cells()
    assert cells == [
        {"effective_snr_db": 0, "N": 8, "scheme": "Conventional"},
        {"effective_snr_db": 0, "N": 16, "scheme": "Conventional"},
        {"effective_snr_db": 10, "N": 8, "scheme": "Conventional"},
        {"effective_snr_db": 10, "N": 16, "scheme": "Conventional"},
    ]


def test_empty_axes_give_one_cell_equal_to_fixed():
    grid = ex.ExperimentGrid(fixed=FIXED)
    assert grid.cells() == [{}]
    assert ex.cell_config(FIXED, {}) == {**FIXED, "estimator": FIXED["estimator"]}


def test_grid_rejects_bad_axes():
    with pytest.raises(ConfigurationError):
        ex.ExperimentGrid(axes={"frequency": [1]})
    with pytest.raises(ConfigurationError):
        ex.ExperimentGrid(axes={"scheme": ["Magic"]})
    with pytest.raises(ConfigurationError):
        ex.ExperimentGrid(axes={"N": 8})


def test_every_cell_validated_before_running():
    grid = ex.ExperimentGrid(axes={"N": [8, 0]}, fixed=FIXED)
    with pytest.raises(ConfigurationError, match="cell 1"):
        ex.run_grid(grid)
    grid = ex.ExperimentGrid(axes={"scheme": ["SIM-Optimized-LowRank"]}, fixed=FIXED)
    with pytest.raises(ConfigurationError):
        ex.validate_grid(grid)


def test_run_grid_rows(tmp_path):
    result = ex.run_grid(small_grid(tmp_path))
    rows = result.rows
    assert len(rows) == 6 and result.num_failed == 0
    for row in rows:
        assert abs(row["empirical_nmse"] - row["closed_form_nmse"]) <= 4 * row["empirical_se"]
    conv = [r for r in rows if r["scheme"] == "Conventional"]
    assert all(r["S"] == "" for r in conv)
    assert all(r["S"] == 4 for r in rows if r["scheme"] != "Conventional")
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["grid_results.csv", "grid_timings.csv", "grid_traces.json", "grid_users.csv"]
    table = list(csv.DictReader((tmp_path / "grid_results.csv").open()))
    assert list(table[0]) == list(ex.RESULT_COLUMNS)
    assert len(list(csv.DictReader((tmp_path / "grid_users.csv").open()))) == 6 * 4
    back = ex.read_results(tmp_path / "grid_results.csv")
    assert back[0]["closed_form_nmse"] == rows[0]["closed_form_nmse"]


def test_low_rank_cells(tmp_path):
    grid = small_grid(axes={"effective_snr_db": [10.0], "N": [16],
                            "scheme": ["SIM-Optimized-LowRank"], "threshold": [0.9]})
    row = ex.run_grid(grid).rows[0]
    assert row["error"] == ""
    assert row["rank"] < 16
    assert row["S"] == -(-row["rank"] // 2)


def test_grid_output_identical_across_worker_counts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ex.run_grid(small_grid(a), workers=1)
    ex.run_grid(small_grid(b), workers=2)
    for name in ("grid_results.csv", "grid_users.csv", "grid_traces.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_failing_cell_is_isolated(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("codebook exploded")

    monkeypatch.setattr(ex, "codebook_baseline", boom)
    result = ex.run_grid(small_grid(tmp_path))
    failed = [r for r in result.rows if r["error"]]
    assert result.num_failed == 2
    assert all(r["scheme"] == "SIM-Codebook" for r in failed)
    assert "codebook exploded" in failed[0]["error"]
    ok = [r for r in result.rows if not r["error"]]
    assert all(isinstance(r["closed_form_nmse"], float) for r in ok)


def test_grid_from_config():
    conf = {"seed": 5, "geometry": {"num_layers": 2},
            "grid": {"name": "mine", "N": [8], "scheme": ["Conventional"]}}
    grid = ex.ExperimentGrid.from_config(conf)
    assert grid.name == "mine" and grid.seed == 5 and grid.trials == 1000
    assert grid.cells() == [{"N": 8, "scheme": "Conventional"}]


def test_figure_presets_have_expected_cells():
    fig2 = ex.figure_grid("fig2")
    assert len(fig2.cells()) == 36
    assert fig2.fixed["geometry"]["num_layers"] == 6
    fig3 = ex.figure_grid("fig3")
    assert sorted({c["L"] for c in fig3.cells()}) == [1, 2, 4, 6, 8]
    assert len(ex.figure_grid("fig4").cells()) == 42
    assert len(ex.figure_grid("fig5").cells()) == 4
    with pytest.raises(ConfigurationError):
        ex.figure_grid("fig9")
    for fid in ex.FIGURES:
        ex.validate_grid(ex.figure_grid(fid))


def _fake_fig2_rows():
    rows = []
    for i, (snr, n, scheme) in enumerate(
            (snr, n, scheme) for snr in (-10, 0, 10, 20, 30, 40) for n in (32, 64)
            for scheme in ("SIM-Optimized", "SIM-Codebook", "Conventional")):
        rows.append({"cell": i, "scheme": scheme, "effective_snr_db": float(snr), "N": n,
                     "M": 4, "L": 6, "S": n // 4, "closed_form_nmse": 0.5 / (i + 1),
                     "empirical_nmse": 0.5 / (i + 1), "empirical_se": 1e-3, "error": ""})
    return rows


def test_fig2_emission(tmp_path):
    manifest = ex.emit_figure_data(_fake_fig2_rows(), "fig2", tmp_path)
    theory = [s for s in manifest["series"] if s["kind"] == "theory"]
    mc = [s for s in manifest["series"] if s["kind"] == "mc"]
    assert len(theory) == 6 and len(mc) == 6
    assert manifest["gaps"] == []
    first = (tmp_path / theory[0]["file"]).read_text().splitlines()
    assert first[0] == "x,y,y_err" and len(first) == 7
    before = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    ex.emit_figure_data(_fake_fig2_rows(), "fig2", tmp_path)
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == before


def test_single_row_and_gap_report(tmp_path):
    row = _fake_fig2_rows()[:1]
    manifest = ex.emit_figure_data(row, "fig2", tmp_path)
    assert [s["points"] for s in manifest["series"]] == [1, 1]
    assert len(manifest["gaps"]) == 35
    saved = json.loads((tmp_path / "fig2_manifest.json").read_text())
    assert saved["series"][0]["figure"] == "fig2"


def test_failed_rows_are_gaps(tmp_path):
    rows = _fake_fig2_rows()
    rows[0]["error"] = "RuntimeError: x"
    manifest = ex.emit_figure_data(rows, "fig2", tmp_path)
    assert len(manifest["gaps"]) == 1


def test_convergence_figure_uses_traces(tmp_path):
    rows = [{"cell": 0, "scheme": "SIM-Optimized", "N": 32, "L": 2, "error": ""}]
    manifest = ex.emit_figure_data(rows, "fig5", tmp_path, traces=[[0.5, 0.3, 0.2]])
    text = (tmp_path / manifest["series"][0]["file"]).read_text().splitlines()
    assert text[1:] == ["0,0.5,0", "1,0.29999999999999999,0", "2,0.20000000000000001,0"]
