import json

import numpy as np
import pytest

from simce.design import (
    DesignHyper,
    codebook_baseline,
    design_estimator,
    evaluate_phases,
    load_design,
    reevaluate,
    save_design,
)
from simce.errors import ConfigurationError, StructuralError
from simce.estimator import PhaseBook, digital_first_order_residual, stack_estimator
from simce.model import build_channel_stats, build_geometry, build_wave_model

CONF = {"geometry": {"num_atoms": 8, "num_antennas": 2, "num_layers": 3},
        "pilot": {"effective_snr_db": 10.0}}
BACKTRACK = dict(decay_policy="on_no_improvement", stopping="relative", patience=3)


@pytest.fixture(scope="module")
def system():
    geom = build_geometry(CONF)
    return build_wave_model(geom), build_channel_stats(geom, CONF)


@pytest.mark.parametrize("extra", [{}, BACKTRACK])
def test_trace_and_termination(system, extra):
    model, stats = system
    hyper = DesignHyper(seed=3, num_restarts=4, max_iters=60, **extra)
    design = design_estimator(model, stats, 4, hyper)
    trace = design.objective_trace
    assert len(trace) == design.iterations + 1
    assert np.all(np.isfinite(trace))
    assert trace[-1] <= trace[0]
    assert design.average_nmse == pytest.approx(trace[-1], rel=1e-12)
    if design.converged and extra.get("stopping", "absolute") == "absolute":
        assert (trace[-1] - trace[-2]) ** 2 < hyper.epsilon
    if not design.converged:
        assert design.iterations == hyper.max_iters


def test_backtracking_trace_is_monotone(system):
    model, stats = system
    design = design_estimator(model, stats, 4, DesignHyper(seed=1, max_iters=80, **BACKTRACK))
    assert np.all(np.diff(design.objective_trace) <= 0)
    assert design.objective_trace[-1] < design.objective_trace[0]


def test_initialization_is_best_restart(system):
    model, stats = system
    design = design_estimator(model, stats, 4, DesignHyper(seed=5, num_restarts=6, max_iters=0))
    assert len(design.restart_objectives) == 6
    assert design.objective_trace[0] == min(design.restart_objectives)
    assert design.objective_trace[0] <= max(design.restart_objectives)


def test_digital_stage_satisfies_first_order_condition(system):
    model, stats = system
    design = design_estimator(model, stats, 4, DesignHyper(seed=2, max_iters=20))
    A = stack_estimator(model, design.phases).observation_map
    for d, c in zip(design.digital, stats.scaled_covariances()):
        assert digital_first_order_residual(A, d, c, stats.rho_tau) <= 1e-8


def test_design_is_deterministic(system):
    model, stats = system
    a = design_estimator(model, stats, 3, DesignHyper(seed=9, max_iters=15))
    b = design_estimator(model, stats, 3, DesignHyper(seed=9, max_iters=15))
    assert a.phases.theta.tobytes() == b.phases.theta.tobytes()
    assert a.objective_trace == b.objective_trace


def test_design_from_initial_phases(system):
    model, stats = system
    init = PhaseBook(np.zeros((4, 3, 8)))
    design = design_estimator(model, stats, 4, DesignHyper(max_iters=5), init=init)
    _, nmse = evaluate_phases(model, stats, init)
    assert design.objective_trace[0] == pytest.approx(float(np.mean(nmse)), rel=1e-12)
    with pytest.raises(StructuralError):
        design_estimator(model, stats, 4, init=PhaseBook(np.zeros((4, 2, 8))))
    with pytest.raises(StructuralError):
        design_estimator(model, stats, 3, init=init)


@pytest.mark.parametrize("kwargs", [
    {"eta": 0.0}, {"decay": 1.0}, {"epsilon": -1.0}, {"num_restarts": 0},
    {"decay_policy": "sometimes"}, {"stopping": "never"}, {"patience": 0},
])
def test_hyper_validation(kwargs):
    with pytest.raises(ConfigurationError):
        DesignHyper(**kwargs)


def test_hyper_from_config():
    hyper = DesignHyper.from_config({"seed": 4, "estimator": {"eta": 0.2, "subphases": 3}})
    assert hyper.eta == 0.2 and hyper.seed == 4
    assert DesignHyper.from_config({"seed": 4}, seed=8).seed == 8


def test_codebook_of_one_is_a_single_draw(system):
    model, stats = system
    book = codebook_baseline(model, stats, 4, codebook_size=1, seed=11)
    first = design_estimator(model, stats, 4, DesignHyper(seed=11, num_restarts=1, max_iters=0))
    assert book.average_nmse == pytest.approx(first.restart_objectives[0], rel=1e-12)
    assert book.scheme == "SIM-Codebook"


def test_codebook_prefix_monotone(system):
    model, stats = system
    small = codebook_baseline(model, stats, 4, codebook_size=8, seed=2)
    large = codebook_baseline(model, stats, 4, codebook_size=30, seed=2)
    assert large.objective_trace[:8] == small.objective_trace
    assert np.all(np.diff(large.objective_trace) <= 0)
    assert large.average_nmse <= small.average_nmse
    with pytest.raises(ConfigurationError):
        codebook_baseline(model, stats, 4, codebook_size=0)


def test_codebook_default_size(system):
    from simce.design import default_codebook_size
    model, _ = system
    assert default_codebook_size(model) == 10 * 3 * 8


def test_low_rank_design(system):
    model, stats = system
    design = design_estimator(model, stats, 2, DesignHyper(seed=0, max_iters=10),
                              low_rank_threshold=0.99)
    assert design.scheme == "SIM-Optimized-LowRank"
    assert all(1 <= r <= 8 for r in design.ranks)
    assert np.all(design.per_user_nmse > 0)


def test_artifact_roundtrip(system, tmp_path):
    model, stats = system
    design = design_estimator(model, stats, 4, DesignHyper(seed=6, max_iters=25))
    path = tmp_path / "d.json"
    save_design(design, path, config=CONF)
    doc = load_design(path)
    assert doc["phases"].theta.tobytes() == design.phases.theta.tobytes()
    again = reevaluate(doc, model, stats)
    assert np.allclose(again.per_user_nmse, design.per_user_nmse, rtol=1e-12, atol=0)
    assert again.objective_trace == design.objective_trace
    assert again.hyper == design.hyper
    raw = json.loads(path.read_text())
    assert raw["shape"] == [4, 3, 8] and len(raw["theta"]) == 96


def test_load_rejects_foreign_documents(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ConfigurationError):
        load_design(path)
