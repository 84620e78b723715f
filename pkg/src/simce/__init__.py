"""Hybrid digital and wave-domain channel estimation for stacked metasurfaces."""

from .config import load_config, resolve
from .design import (
    DesignHyper,
    EstimatorDesign,
    codebook_baseline,
    design_estimator,
    evaluate_phases,
    load_design,
    reevaluate,
    save_design,
)
from .errors import (
    ConfigurationError,
    DegenerateUserError,
    GeometryError,
    NumericalError,
    SimceError,
    StructuralError,
)
from .estimator import (
    PhaseBook,
    conventional_mmse,
    low_rank_reduce,
    min_subphases,
    nmse_closed_form,
    nmse_gradient,
    normalize_gradient,
    optimal_digital_estimator,
    stack_estimator,
    wave_response,
)
from .experiments import ExperimentGrid, emit_figure_data, figure_grid, run_grid
from .model import (
    ChannelStats,
    SimGeometry,
    WaveModel,
    build_channel_stats,
    build_geometry,
    build_wave_model,
    path_loss,
)
from .montecarlo import empirical_nmse, sample_channel, simulate_training

__version__ = "0.1.0"
