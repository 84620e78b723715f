"""Parameter grids over schemes and system sizes, run cell by cell.

A grid is the Cartesian product of its axes, enumerated in :data:`AXES`
order with each axis's values in the order given.  Every cell is validated
before any runs.  Cells are independent; with ``workers > 1`` they run in a
process pool, and the output is assembled in cell order so it never depends
on scheduling.  Wall times go to a separate file so the results table is
byte-for-byte reproducible.
"""

import csv
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from .design import DesignHyper, codebook_baseline, design_estimator
from .errors import ConfigurationError
from .estimator import conventional_mmse, low_rank_reduce, min_subphases, stack_estimator
from .model import build_channel_stats, build_geometry, build_wave_model
from .montecarlo import batch_rows, empirical_nmse

log = logging.getLogger(__name__)

SCHEMES = ("SIM-Optimized", "SIM-Codebook", "Conventional", "SIM-Optimized-LowRank")
AXES = ("effective_snr_db", "N", "M", "L", "S", "scheme", "threshold")

RESULT_COLUMNS = (
    "cell", "scheme", "effective_snr_db", "N", "M", "L", "S", "threshold",
    "nx", "nz", "rank", "closed_form_nmse", "empirical_nmse", "empirical_se",
    "trials", "seed", "iterations", "converged", "error",
)

# Gradient-descent profile used by the figure presets: backtracking step
# control and a relative stopping test held for three iterations.
EXPERIMENT_ESTIMATOR = {
    "decay_policy": "on_no_improvement",
    "stopping": "relative",
    "epsilon": 1e-3,
    "patience": 3,
}


@dataclass
class ExperimentGrid:
    """Axes to sweep, the fixed configuration, replication and outputs."""

    axes: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    trials: int = 1000
    seed: int = 0
    output_dir: str = None
    name: str = "grid"

    def __post_init__(self):
        for key, values in self.axes.items():
            if key not in AXES:
                raise ConfigurationError(f"grid.{key}", f"unknown axis; expected one of {AXES}")
            if isinstance(values, (str, bytes)) or not hasattr(values, "__iter__"):
                raise ConfigurationError(f"grid.{key}", "axis values must be a list")
        for scheme in self.axes.get("scheme", ()):
            if scheme not in SCHEMES:
                raise ConfigurationError("grid.scheme", f"unknown scheme {scheme!r}")
        if int(self.trials) < 1:
            raise ConfigurationError("monte_carlo.trials", "must be positive")

    def cells(self):
        """Cells in deterministic order; an empty grid has one empty cell."""
        names = [a for a in AXES if a in self.axes]
        return [dict(zip(names, combo))
                for combo in itertools.product(*(list(self.axes[a]) for a in names))]

    @classmethod
    def from_config(cls, conf, output_dir=None, seed=None, trials=None):
        """Build a grid from a configuration with a ``[grid]`` table of axes."""
        conf = dict(conf)
        axes = dict(conf.pop("grid", {}) or {})
        name = axes.pop("name", "grid")
        fixed = cfg.resolve(conf)
        seed = int(fixed.get("seed", 0) if seed is None else seed)
        trials = int(fixed["monte_carlo"]["trials"] if trials is None else trials)
        return cls(axes=axes, fixed=conf, trials=trials, seed=seed,
                   output_dir=output_dir, name=name)


def cell_config(fixed, cell):
    """Configuration for one cell: the fixed part with the axis values applied."""
    conf = cfg.deep_merge({}, fixed)
    geo = conf.setdefault("geometry", {})
    if "N" in cell:
        for key in ("nx", "nz"):
            geo.pop(key, None)
        geo["num_atoms"] = int(cell["N"])
    if "M" in cell:
        geo["num_antennas"] = int(cell["M"])
    if "L" in cell:
        geo["num_layers"] = int(cell["L"])
    if "effective_snr_db" in cell:
        conf.setdefault("pilot", {})["effective_snr_db"] = float(cell["effective_snr_db"])
    est = conf.setdefault("estimator", {})
    if "S" in cell:
        est["subphases"] = int(cell["S"])
    if cell.get("threshold") is not None:
        est["low_rank_threshold"] = float(cell["threshold"])
    return conf


def _scheme(cell):
    scheme = cell.get("scheme", "SIM-Optimized")
    if scheme not in SCHEMES:
        raise ConfigurationError("scheme", f"unknown scheme {scheme!r}")
    return scheme


def prepare_cell(fixed, cell):
    """Validate one cell and build its model objects."""
    conf = cell_config(fixed, cell)
    scheme = _scheme(cell)
    geom = build_geometry(conf)
    stats = build_channel_stats(geom, conf)
    resolved = cfg.resolve(conf)
    est = resolved["estimator"]
    hyper = DesignHyper.from_config(resolved)
    threshold = est.get("low_rank_threshold")
    if scheme == "SIM-Optimized-LowRank" and threshold is None:
        raise ConfigurationError("estimator.low_rank_threshold", "required by the low-rank scheme")
    if threshold is not None and not 0 < threshold <= 1:
        raise ConfigurationError("estimator.low_rank_threshold", "must lie in (0, 1]")
    subphases = est.get("subphases")
    if subphases is not None and int(subphases) < 1:
        raise ConfigurationError("estimator.subphases", "must be at least 1")
    return {"conf": resolved, "scheme": scheme, "geom": geom, "stats": stats,
            "hyper": hyper, "threshold": threshold, "subphases": subphases}


def validate_grid(grid):
    """Validate every cell; raises :class:`ConfigurationError` naming the first bad one."""
    cells = grid.cells()
    for i, cell in enumerate(cells):
        try:
            prepare_cell(grid.fixed, cell)
        except ConfigurationError as exc:
            raise ConfigurationError(exc.field, f"cell {i} {cell}: {exc.message}") from None
    return cells


def _default_subphases(prep, ranks=None):
    m = prep["geom"].num_antennas
    unknowns = max(ranks) if ranks else prep["geom"].num_atoms
    return min_subphases(unknowns, m)


def run_cell(fixed, cell, trials, seed, index=0):
    """Run one cell; returns ``(row, trace, user_rows, wall_time)``.

    Failures are caught and reported in the row's ``error`` column.
    """
    start = time.perf_counter()
    row = {c: "" for c in RESULT_COLUMNS}
    row.update(cell=index, trials=int(trials), seed=int(seed))
    for key in ("effective_snr_db", "N", "M", "L", "S", "threshold"):
        if key in cell and cell[key] is not None:
            row[key] = cell[key]
    row["scheme"] = cell.get("scheme", "SIM-Optimized")
    trace, user_rows = [], []
    try:
        prep = prepare_cell(fixed, cell)
        geom, stats = prep["geom"], prep["stats"]
        row.update(scheme=prep["scheme"], N=geom.num_atoms, M=geom.num_antennas,
                   L=geom.num_layers, nx=geom.nx, nz=geom.nz)
        scheme = prep["scheme"]
        if scheme == "Conventional":
            conv = conventional_mmse(stats)
            A = np.eye(geom.num_atoms, dtype=complex)
            digital = [g.conj().T for g in conv.estimators]
            closed = conv.average_nmse
            row["S"] = ""
        else:
            model = build_wave_model(geom)
            ranks = None
            if scheme == "SIM-Optimized-LowRank":
                ranks = [low_rank_reduce(c, prep["threshold"]).rank
                         for c in stats.scaled_covariances()]
                row["rank"] = max(ranks)
            s = prep["subphases"] or _default_subphases(prep, ranks)
            row["S"] = int(s)
            if scheme == "SIM-Codebook":
                size = prep["conf"]["estimator"].get("codebook_size")
                design = codebook_baseline(model, stats, s, size, seed=seed)
            else:
                threshold = prep["threshold"] if scheme == "SIM-Optimized-LowRank" else None
                design = design_estimator(model, stats, s, prep["hyper"],
                                          low_rank_threshold=threshold)
                row["converged"] = int(design.converged)
            row["iterations"] = design.iterations
            trace = [float(v) for v in design.objective_trace]
            A = stack_estimator(model, design.phases).observation_map
            digital = design.digital
            closed = design.average_nmse
        mc = empirical_nmse(A, digital, stats, trials, seed)
        row.update(closed_form_nmse=float(closed), empirical_nmse=mc.average_mean,
                   empirical_se=mc.average_se)
        user_rows = batch_rows(index, row["scheme"], mc)
    except Exception as exc:  # noqa: BLE001 - isolate the cell, keep the grid going
        log.warning("cell %d failed: %s: %s", index, type(exc).__name__, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row, trace, user_rows, time.perf_counter() - start


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class GridResult:
    rows: list
    traces: list
    user_rows: list
    wall_times: list

    @property
    def num_failed(self):
        return sum(1 for r in self.rows if r["error"])


def run_grid(grid, workers=1):
    """Run every cell of ``grid``; writes output files when ``grid.output_dir`` is set."""
    cells = validate_grid(grid)
    args = [(grid.fixed, cell, grid.trials, grid.seed, i) for i, cell in enumerate(cells)]
    log.info("running %d cells with %d worker(s)", len(cells), workers)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell_args, args))
    else:
        outputs = []
        for i, a in enumerate(args):
            outputs.append(run_cell(*a))
            log.info("cell %d/%d done", i + 1, len(args))
    result = GridResult(
        rows=[o[0] for o in outputs],
        traces=[o[1] for o in outputs],
        user_rows=[r for o in outputs for r in o[2]],
        wall_times=[o[3] for o in outputs],
    )
    if grid.output_dir:
        write_grid_outputs(grid, result)
    return result


def format_value(value):
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def write_table(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c, "")) for c in columns])


def write_grid_outputs(grid, result):
    """Results table, per-user MC table, traces, and (separately) wall times."""
    os.makedirs(grid.output_dir, exist_ok=True)
    base = os.path.join(grid.output_dir, grid.name)
    write_table(f"{base}_results.csv", RESULT_COLUMNS, result.rows)
    write_table(f"{base}_users.csv",
                ("config", "scheme", "user", "mean_nmse", "std_error", "trials", "seed"),
                result.user_rows)
    with open(f"{base}_traces.json", "w") as fh:
        json.dump([{"cell": i, "trace": t} for i, t in enumerate(result.traces)], fh)
        fh.write("\n")
    write_table(f"{base}_timings.csv", ("cell", "wall_time_s"),
                [{"cell": i, "wall_time_s": t} for i, t in enumerate(result.wall_times)])


def read_results(path):
    """Read a results table back, converting numeric columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key, value in row.items():
            if key in ("scheme", "error") or value == "":
                continue
            num = float(value)
            row[key] = int(num) if key in ("cell", "N", "M", "L", "S", "nx", "nz", "rank",
                                           "trials", "seed", "iterations", "converged") else num
    return rows


# ---------------------------------------------------------------------------
# figure presets


def _preset_fixed(extra=None):
    fixed = {"estimator": dict(EXPERIMENT_ESTIMATOR)}
    return cfg.deep_merge(fixed, extra or {})


FIGURES = {
    "fig2": {
        "axes": {"effective_snr_db": [-10, 0, 10, 20, 30, 40], "N": [32, 64],
                 "scheme": ["SIM-Optimized", "SIM-Codebook", "Conventional"]},
        "fixed": {"geometry": {"num_antennas": 4, "num_layers": 6}},
        "x": "effective_snr_db",
        "series": ("scheme", "N"),
    },
    "fig3": {
        "axes": {"N": [32, 64], "L": [1, 2, 4, 6, 8],
                 "scheme": ["SIM-Optimized", "SIM-Codebook", "Conventional"]},
        "fixed": {"geometry": {"num_antennas": 4}, "pilot": {"effective_snr_db": 10.0}},
        "x": "L",
        "series": ("scheme", "N"),
    },
    "fig4": {
        "axes": {"M": [4, 8], "L": [2, 4, 6], "S": [4, 6, 8, 10, 12, 14, 16],
                 "scheme": ["SIM-Optimized"]},
        "fixed": {"geometry": {"num_atoms": 48}, "pilot": {"effective_snr_db": 10.0}},
        "x": "S",
        "series": ("scheme", "M", "L"),
    },
    "fig5": {
        "axes": {"N": [32, 64], "L": [2, 6], "scheme": ["SIM-Optimized"]},
        "fixed": {"geometry": {"num_antennas": 4}, "pilot": {"effective_snr_db": 10.0}},
        "x": "iteration",
        "series": ("scheme", "N", "L"),
    },
}


def figure_grid(figure_id, trials=1000, seed=0, output_dir=None, overrides=None):
    """Preset grid for one figure; ``overrides`` is merged into the fixed config."""
    if figure_id not in FIGURES:
        raise ConfigurationError("figure", f"unknown figure {figure_id!r}; expected {sorted(FIGURES)}")
    preset = FIGURES[figure_id]
    fixed = cfg.deep_merge(_preset_fixed(preset["fixed"]), overrides or {})
    return ExperimentGrid(axes={k: list(v) for k, v in preset["axes"].items()}, fixed=fixed,
                          trials=trials, seed=seed, output_dir=output_dir, name=figure_id)


def _series_name(keys, row):
    parts = [str(row["scheme"])]
    for key in keys[1:]:
        if row["scheme"] == "Conventional" and key in ("L", "M"):
            continue
        parts.append(f"{key}{row[key]}")
    return "_".join(parts)


def _sort_key(value):
    return (0, value) if isinstance(value, (int, float)) else (1, str(value))


def emit_figure_data(rows, figure_id, output_dir, traces=None):
    """Write one CSV per curve plus a manifest and a gap report.

    Theory series use the closed-form NMSE with a zero error column; ``_mc``
    series hold the Monte-Carlo means with their standard errors.  The
    convergence figure needs ``traces`` (one list per results row) and
    writes the objective against iteration.  Returns the manifest.
    """
    if figure_id not in FIGURES:
        raise ConfigurationError("figure", f"unknown figure {figure_id!r}")
    preset = FIGURES[figure_id]
    os.makedirs(output_dir, exist_ok=True)
    ok = [r for r in rows if not r.get("error")]
    grouped = {}
    for idx, row in enumerate(rows):
        if row.get("error"):
            continue
        grouped.setdefault(_series_name(preset["series"], row), []).append((idx, row))

    files = []
    for name in sorted(grouped):
        members = grouped[name]
        if preset["x"] == "iteration":
            idx, _ = members[0]
            trace = (traces or [[]])[idx] if traces is not None else []
            points = [(i, v, 0.0) for i, v in enumerate(trace)]
            kinds = (("theory", points),)
        else:
            members = sorted(members, key=lambda m: _sort_key(m[1][preset["x"]]))
            theory = [(m[1][preset["x"]], m[1]["closed_form_nmse"], 0.0) for m in members]
            mc = [(m[1][preset["x"]], m[1]["empirical_nmse"], m[1]["empirical_se"]) for m in members]
            kinds = (("theory", theory), ("mc", mc))
        for kind, points in kinds:
            fname = f"{figure_id}_{name}_{kind}.csv"
            write_table(os.path.join(output_dir, fname), ("x", "y", "y_err"),
                        [{"x": x, "y": float(y), "y_err": float(e)} for x, y, e in points])
            files.append({"file": fname, "series": name, "kind": kind,
                          "figure": figure_id, "points": len(points)})

    gaps = _gap_report(rows, figure_id)
    manifest = {"figure": figure_id, "x": preset["x"], "series": files,
                "rows_used": len(ok), "gaps": gaps}
    with open(os.path.join(output_dir, f"{figure_id}_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if gaps:
        log.warning("%s: %d expected cell(s) missing or failed", figure_id, len(gaps))
    return manifest


def _gap_report(rows, figure_id):
    """Preset cells with no successful row, matched on the axis values."""
    grid = figure_grid(figure_id)
    have = set()
    for row in rows:
        if row.get("error"):
            continue
        have.add(tuple((k, _norm(row.get(k))) for k in AXES if k in grid.axes))
    gaps = []
    for cell in grid.cells():
        key = tuple((k, _norm(cell[k])) for k in AXES if k in grid.axes)
        if key not in have:
            gaps.append(cell)
    return gaps


def _norm(value):
    if isinstance(value, str):
        return value
    try:
        return float(value)
    except (TypeError, ValueError):
        return value


def summarize(rows):
    """Short text table for the terminal."""
    lines = [f"{'cell':>4} {'scheme':<22} {'snr':>6} {'N':>3} {'M':>3} {'L':>2} {'S':>3} "
             f"{'closed':>10} {'mc':>10} {'se':>9} {'it':>4}"]
    for r in rows:
        if r["error"]:
            lines.append(f"{r['cell']:>4} {r['scheme']:<22} ERROR {r['error']}")
            continue
        snr = r["effective_snr_db"]
        lines.append(
            f"{r['cell']:>4} {r['scheme']:<22} {snr if snr != '' else '-':>6} {r['N']:>3} "
            f"{r['M']:>3} {r['L']:>2} {r['S'] if r['S'] != '' else '-':>3} "
            f"{r['closed_form_nmse']:>10.4g} {r['empirical_nmse']:>10.4g} "
            f"{r['empirical_se']:>9.2g} {r['iterations'] if r['iterations'] != '' else '-':>4}")
    return "\n".join(lines)
