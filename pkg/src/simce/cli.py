"""Command-line entry point: ``simce {design,evaluate,grid,figure}``.

Exit codes: 0 success, 1 configuration error, 2 some grid cells failed,
3 internal error.  Logs go to standard error; data goes to files or
standard output.
"""

import argparse
import json
import logging
import os
import sys

from . import config as cfg
from .design import (
    DesignHyper,
    codebook_baseline,
    design_estimator,
    load_design,
    reevaluate,
    save_design,
)
from .errors import ConfigurationError, SimceError
from .estimator import low_rank_reduce, min_subphases, stack_estimator
from .experiments import (
    FIGURES,
    ExperimentGrid,
    emit_figure_data,
    figure_grid,
    read_results,
    run_grid,
    summarize,
    validate_grid,
)
from .model import build_channel_stats, build_geometry, build_wave_model
from .montecarlo import batch_rows, empirical_nmse, write_batch_rows

log = logging.getLogger("simce")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3


def _load(args, extra_sections=()):
    if args.config:
        try:
            conf = cfg.load_config(args.config, extra_sections)
        except OSError as exc:
            raise ConfigurationError("config", f"cannot read {args.config}: {exc}") from None
        except cfg.tomllib.TOMLDecodeError as exc:
            raise ConfigurationError("config", f"{args.config}: {exc}") from None
        # keep only what the file set, so defaults do not pin the grid
        with open(args.config, "rb") as fh:
            raw = cfg.tomllib.load(fh)
        return raw, conf
    return {}, cfg.resolve({})


def _seed(args, conf):
    return int(conf.get("seed", 0) if args.seed is None else args.seed)


def _out(args, name):
    os.makedirs(args.output_dir, exist_ok=True)
    return os.path.join(args.output_dir, name)


def cmd_design(args):
    raw, conf = _load(args)
    seed = _seed(args, conf)
    geom = build_geometry(conf)
    stats = build_channel_stats(geom, conf)
    model = build_wave_model(geom)
    est = conf["estimator"]
    hyper = DesignHyper.from_config(conf, seed)
    threshold = est.get("low_rank_threshold") if args.scheme == "SIM-Optimized-LowRank" else None
    if args.scheme == "SIM-Optimized-LowRank" and threshold is None:
        raise ConfigurationError("estimator.low_rank_threshold", "required by the low-rank scheme")
    unknowns = geom.num_atoms
    if threshold is not None:
        unknowns = max(low_rank_reduce(c, threshold).rank for c in stats.scaled_covariances())
    s = args.subphases or est.get("subphases") or min_subphases(unknowns, geom.num_antennas)
    if args.dry_run:
        log.info("configuration valid: N=%d M=%d L=%d S=%d", geom.num_atoms,
                 geom.num_antennas, geom.num_layers, s)
        return EXIT_OK
    if args.scheme == "SIM-Codebook":
        design = codebook_baseline(model, stats, s, est.get("codebook_size"), seed=seed)
    else:
        design = design_estimator(model, stats, s, hyper, low_rank_threshold=threshold)
    path = _out(args, args.name)
    save_design(design, path, config=raw)
    print(json.dumps({"design": path, "scheme": design.scheme,
                      "average_nmse": design.average_nmse,
                      "iterations": design.iterations, "converged": design.converged}))
    return EXIT_OK


def cmd_evaluate(args):
    doc = load_design(args.design)
    raw = doc.get("config") or {}
    if args.config:
        raw, _ = _load(args)
    conf = cfg.resolve(raw)
    seed = _seed(args, conf)
    geom = build_geometry(conf)
    stats = build_channel_stats(geom, conf)
    model = build_wave_model(geom)
    design = reevaluate(doc, model, stats)
    trials = args.trials or conf["monte_carlo"]["trials"]
    if args.dry_run:
        return EXIT_OK
    A = stack_estimator(model, design.phases).observation_map
    mc = empirical_nmse(A, design.digital, stats, trials, seed, path=args.path)
    path = _out(args, "evaluation.csv")
    write_batch_rows(batch_rows(os.path.basename(args.design), design.scheme, mc), path)
    print(json.dumps({"closed_form_nmse": design.average_nmse,
                      "empirical_nmse": mc.average_mean, "empirical_se": mc.average_se,
                      "trials": trials, "seed": seed, "table": path}))
    return EXIT_OK


def _finish_grid(args, grid):
    validate_grid(grid)
    cells = grid.cells()
    if args.dry_run:
        log.info("%d cells valid", len(cells))
        return EXIT_OK, None
    result = run_grid(grid, workers=args.workers)
    print(summarize(result.rows))
    return (EXIT_PARTIAL if result.num_failed else EXIT_OK), result


def cmd_grid(args):
    raw, conf = _load(args, extra_sections=("grid",))
    grid = ExperimentGrid.from_config(raw, output_dir=args.output_dir, seed=args.seed,
                                      trials=args.trials)
    code, _ = _finish_grid(args, grid)
    return code


def cmd_figure(args):
    if args.from_results:
        rows = read_results(args.from_results)
        traces = None
        traces_path = args.from_results.replace("_results.csv", "_traces.json")
        if os.path.exists(traces_path):
            with open(traces_path) as fh:
                traces = [t["trace"] for t in json.load(fh)]
        manifest = emit_figure_data(rows, args.figure, args.output_dir, traces)
        return EXIT_PARTIAL if manifest["gaps"] else EXIT_OK
    overrides = {}
    if args.config:
        overrides, _ = _load(args)
    grid = figure_grid(args.figure, trials=args.trials or 1000,
                       seed=0 if args.seed is None else args.seed,
                       output_dir=args.output_dir, overrides=overrides)
    code, result = _finish_grid(args, grid)
    if result is not None:
        emit_figure_data(result.rows, args.figure, args.output_dir, result.traces)
    return code


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("-o", "--output-dir", default="results", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate and exit")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="simce", description="Hybrid digital and wave-domain channel estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", parents=[common], help="design an estimator and save it")
    p.add_argument("--scheme", default="SIM-Optimized",
                   choices=["SIM-Optimized", "SIM-Codebook", "SIM-Optimized-LowRank"])
    p.add_argument("-S", "--subphases", type=int, default=None)
    p.add_argument("--name", default="design.json", help="artifact file name")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("evaluate", parents=[common], help="Monte-Carlo evaluation of a saved design")
    p.add_argument("design", help="design artifact (JSON)")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--path", choices=["reduced", "full"], default="reduced")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("grid", cmd_grid, "run a parameter grid from a config file"),
                                 ("figure", cmd_figure, "run a figure preset and emit plot data")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("-j", "--workers", type=int, default=1, help="parallel cells")
        p.add_argument("--trials", type=int, default=None)
        p.set_defaults(func=func)
    p.add_argument("figure", choices=sorted(FIGURES))
    p.add_argument("--from-results", default=None,
                   help="emit plot data from an existing results table instead of running")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except SimceError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
