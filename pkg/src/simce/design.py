"""Phase design: gradient descent, random codebook, and design artifacts."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, NumericalError, StructuralError
from .estimator import (
    PhaseBook,
    _gradient,
    _responses,
    low_rank_reduce,
    nmse_from_factor,
    normalize_gradient,
    observation_map_from,
    optimal_digital_estimator,
    wrap_phase,
)

log = logging.getLogger(__name__)

DESIGN_FORMAT = "simce-design/1"
DECAY_POLICIES = ("every", "on_no_improvement")
STOPPING_RULES = ("absolute", "relative")


@dataclass(frozen=True)
class DesignHyper:
    """Hyperparameters of the gradient-descent phase design.

    ``decay_policy="every"`` shrinks the step after every iteration;
    ``"on_no_improvement"`` keeps the step while it lowers the objective and
    shrinks it (retrying within the iteration) otherwise.  ``stopping`` picks
    between ``(change)^2 < epsilon`` and ``|change| < epsilon * previous``;
    the test has to hold ``patience`` iterations in a row.
    """

    eta: float = 0.1
    decay: float = 0.5
    epsilon: float = 1e-3
    max_iters: int = 200
    num_restarts: int = 10
    seed: int = 0
    decay_policy: str = "every"
    stopping: str = "absolute"
    patience: int = 1
    max_backtracks: int = 40

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("estimator.eta", "must be positive")
        if not 0 < self.decay < 1:
            raise ConfigurationError("estimator.decay", "must lie in (0, 1)")
        if not self.epsilon >= 0:
            raise ConfigurationError("estimator.epsilon", "must be non-negative")
        if self.max_iters < 0 or self.num_restarts < 1 or self.patience < 1:
            raise ConfigurationError("estimator.max_iters", "iteration counts must be positive")
        if self.decay_policy not in DECAY_POLICIES:
            raise ConfigurationError("estimator.decay_policy", f"expected one of {DECAY_POLICIES}")
        if self.stopping not in STOPPING_RULES:
            raise ConfigurationError("estimator.stopping", f"expected one of {STOPPING_RULES}")

    @classmethod
    def from_config(cls, conf, seed=None):
        est = conf.get("estimator", {})
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in est.items() if k in names}
        kwargs["seed"] = int(conf.get("seed", 0) if seed is None else seed)
        return cls(**kwargs)


@dataclass
class EstimatorDesign:
    """A designed estimator: phases, matching digital stages, and metadata."""

    scheme: str
    phases: PhaseBook
    digital: list
    per_user_nmse: np.ndarray
    objective_trace: list
    hyper: DesignHyper = None
    converged: bool = True
    iterations: int = 0
    seed: int = 0
    low_rank_threshold: float = None
    ranks: list = None
    restart_objectives: list = field(default_factory=list)

    @property
    def average_nmse(self):
        return float(np.mean(self.per_user_nmse))

    @property
    def num_subphases(self):
        return self.phases.num_subphases


class EstimationProblem:
    """Everything needed to score a phase book for one system.

    ``design_covs``/``design_factors`` drive the optimization (possibly a
    low-rank truncation); ``true_covs``/``true_factors`` score the result.
    """

    def __init__(self, model, stats, low_rank_threshold=None):
        self.model = model
        self.rho_tau = stats.rho_tau
        self.true_covs = stats.scaled_covariances()
        self.true_factors = stats.scaled_sqrts()
        self.low_rank_threshold = low_rank_threshold
        if low_rank_threshold is None:
            self.design_covs = self.true_covs
            self.design_factors = self.true_factors
            self.ranks = None
        else:
            reduced = [low_rank_reduce(c, low_rank_threshold) for c in self.true_covs]
            self.design_covs = [r.covariance for r in reduced]
            self.design_factors = [r.factor for r in reduced]
            self.ranks = [r.rank for r in reduced]

    def check(self, phases):
        if phases.num_layers != self.model.num_layers or phases.num_atoms != self.model.num_atoms:
            raise StructuralError(
                f"phases {phases.theta.shape} do not match L = {self.model.num_layers}, "
                f"N = {self.model.num_atoms}")

    def evaluate(self, phasors):
        """Objective, optimal digital stages and observation map for ``phasors``."""
        g = _responses(self.model.inter_layer, phasors)
        A = observation_map_from(self.model.w1, g)
        digital = [optimal_digital_estimator(A, c, self.rho_tau) for c in self.design_covs]
        per_user = [nmse_from_factor(A, d, f, self.rho_tau) for d, f in zip(digital, self.design_factors)]
        return float(np.mean(per_user)), digital, A

    def gradient(self, phasors, A, digital):
        return _gradient(self.model.w1, self.model.inter_layer, phasors, A, digital,
                         self.design_factors)

    def true_nmse(self, A, digital):
        return np.array([nmse_from_factor(A, d, f, self.rho_tau)
                         for d, f in zip(digital, self.true_factors)])


def evaluate_phases(model, stats, phases, low_rank_threshold=None):
    """Optimal digital stages for fixed phases and the resulting per-user NMSE."""
    problem = EstimationProblem(model, stats, low_rank_threshold)
    problem.check(phases)
    _, digital, A = problem.evaluate(phases.phasors)
    return digital, problem.true_nmse(A, digital)


def _converged(trace, hyper):
    delta = trace[-1] - trace[-2]
    if hyper.stopping == "absolute":
        return delta * delta < hyper.epsilon
    return abs(delta) < hyper.epsilon * abs(trace[-2])


def design_estimator(model, stats, num_subphases, hyper=None, *, low_rank_threshold=None,
                     init=None):
    """Design the wave-domain phases by normalized gradient descent.

    Starts from the best of ``hyper.num_restarts`` uniformly random phase
    books (or from ``init``), then repeats: gradient, per-slice
    normalization, phase step, digital-stage update, step decay.  The
    objective trace holds one value per iteration, starting with the
    initialization.
    """
    hyper = hyper or DesignHyper()
    if num_subphases < 1:
        raise ConfigurationError("estimator.subphases", "must be at least 1")
    problem = EstimationProblem(model, stats, low_rank_threshold)
    rng = np.random.default_rng(hyper.seed)
    shape = (num_subphases, model.num_layers, model.num_atoms)

    restart_objectives = []
    if init is not None:
        problem.check(init)
        if init.num_subphases != num_subphases:
            raise StructuralError("initial phase book has the wrong number of sub-phases")
        theta = init.theta.copy()
        value, digital, A = problem.evaluate(init.phasors)
        restart_objectives.append(value)
    else:
        best = None
        for _ in range(hyper.num_restarts):
            cand = rng.uniform(0.0, 2 * np.pi, size=shape)
            value, digital_c, A_c = problem.evaluate(np.exp(1j * cand))
            restart_objectives.append(value)
            if best is None or value < best[0]:
                best = (value, cand, digital_c, A_c)
        value, theta, digital, A = best
    if not np.isfinite(value):
        raise NumericalError("non-finite objective at initialization", iteration=0)

    trace = [value]
    eta = hyper.eta
    quiet = 0
    converged = False
    for it in range(1, hyper.max_iters + 1):
        phasors = np.exp(1j * theta)
        step = normalize_gradient(problem.gradient(phasors, A, digital))
        if hyper.decay_policy == "every":
            theta = wrap_phase(theta - eta * step)
            value, digital, A = problem.evaluate(np.exp(1j * theta))
            eta *= hyper.decay
        else:
            for _ in range(hyper.max_backtracks):
                cand = wrap_phase(theta - eta * step)
                cand_value, cand_digital, cand_A = problem.evaluate(np.exp(1j * cand))
                if cand_value < value:
                    break
                eta *= hyper.decay
            else:
                log.debug("no descent step found after %d backtracks", hyper.max_backtracks)
                converged = True
                break
            theta, value, digital, A = cand, cand_value, cand_digital, cand_A
        if not np.isfinite(value):
            raise NumericalError(f"non-finite objective at iteration {it}", iteration=it)
        trace.append(value)
        quiet = quiet + 1 if _converged(trace, hyper) else 0
        if quiet >= hyper.patience:
            converged = True
            break
    log.debug("design finished after %d iterations, NMSE %.6g", len(trace) - 1, trace[-1])

    phases = PhaseBook(theta)
    return EstimatorDesign(
        scheme="SIM-Optimized" if low_rank_threshold is None else "SIM-Optimized-LowRank",
        phases=phases,
        digital=digital,
        per_user_nmse=problem.true_nmse(A, digital),
        objective_trace=trace,
        hyper=hyper,
        converged=converged,
        iterations=len(trace) - 1,
        seed=hyper.seed,
        low_rank_threshold=low_rank_threshold,
        ranks=problem.ranks,
        restart_objectives=restart_objectives,
    )


def default_codebook_size(model):
    return 10 * model.num_layers * model.num_atoms


def codebook_baseline(model, stats, num_subphases, codebook_size=None, seed=0):
    """Best of ``codebook_size`` random phase books, each with its optimal digital stage.

    Entries are drawn in sequence from one generator, so a smaller codebook
    with the same seed is a prefix of a larger one.  The trace records the
    running minimum.
    """
    codebook_size = default_codebook_size(model) if codebook_size is None else int(codebook_size)
    if codebook_size < 1:
        raise ConfigurationError("estimator.codebook_size", "must be at least 1")
    problem = EstimationProblem(model, stats)
    rng = np.random.default_rng(seed)
    shape = (num_subphases, model.num_layers, model.num_atoms)
    best = None
    trace = []
    for _ in range(codebook_size):
        cand = rng.uniform(0.0, 2 * np.pi, size=shape)
        value, digital, A = problem.evaluate(np.exp(1j * cand))
        if best is None or value < best[0]:
            best = (value, cand, digital, A)
        trace.append(best[0])
    value, theta, digital, A = best
    return EstimatorDesign(
        scheme="SIM-Codebook",
        phases=PhaseBook(theta),
        digital=digital,
        per_user_nmse=problem.true_nmse(A, digital),
        objective_trace=trace,
        iterations=codebook_size,
        seed=seed,
    )


def save_design(design, path, config=None):
    """Write a design as JSON.

    ``theta`` is flattened in row-major ``(S, L, N)`` order, in radians.
    Floats are written with Python's shortest round-trip representation (at
    most 17 significant digits), so reloading is exact.  Digital stages are
    not stored; they are recomputed from the phases.
    """
    doc = {
        "format": DESIGN_FORMAT,
        "scheme": design.scheme,
        "seed": int(design.seed),
        "hyper": asdict(design.hyper) if design.hyper is not None else None,
        "low_rank_threshold": design.low_rank_threshold,
        "ranks": design.ranks,
        "shape": list(design.phases.theta.shape),
        "theta": [float(x) for x in design.phases.theta.ravel()],
        "per_user_nmse": [float(x) for x in design.per_user_nmse],
        "average_nmse": design.average_nmse,
        "iterations": int(design.iterations),
        "converged": bool(design.converged),
        "objective_trace": [float(x) for x in design.objective_trace],
        "config": config,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_design(path):
    """Read a design artifact; returns the raw document with ``phases`` added."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != DESIGN_FORMAT:
        raise ConfigurationError("format", f"not a {DESIGN_FORMAT} document")
    theta = np.array(doc["theta"], dtype=float).reshape(doc["shape"])
    doc["phases"] = PhaseBook(theta)
    return doc


def reevaluate(doc, model, stats):
    """Rebuild an :class:`EstimatorDesign` from a loaded artifact."""
    hyper = DesignHyper(**doc["hyper"]) if doc.get("hyper") else None
    digital, nmse = evaluate_phases(model, stats, doc["phases"], doc.get("low_rank_threshold"))
    return EstimatorDesign(
        scheme=doc["scheme"],
        phases=doc["phases"],
        digital=digital,
        per_user_nmse=nmse,
        objective_trace=list(doc["objective_trace"]),
        hyper=hyper,
        converged=doc["converged"],
        iterations=doc["iterations"],
        seed=doc["seed"],
        low_rank_threshold=doc.get("low_rank_threshold"),
        ranks=doc.get("ranks"),
    )
