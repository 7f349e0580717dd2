"""Nuclear-spin detection from NV-center CPMG coherence traces.

Forward model, lattice scenarios, Gaussian decomposition, fan-diagram line
grouping and hyperfine fitting, with a command-line front end (``nvsd``).
"""

__version__ = "0.1.0"

from .physics import (  # noqa: E402
    FieldConfig,
    SequenceConfig,
    Signal,
    SpinParams,
    coherence_multi,
    coherence_single,
    dip_frequency,
    dip_position,
    params_from_slope_sigma,
    sigma_from_params,
    slope_from_params,
)
from .lattice import ScenarioConfig, make_scenario  # noqa: E402
from .decomposition import GaussianDecomposition  # noqa: E402
from .detection import CPMGLineFit  # noqa: E402
from .fitting import error_metric, match_spins  # noqa: E402
from .pipeline import PipelineConfig, SpinDetector  # noqa: E402

__all__ = [
    "CPMGLineFit",
    "FieldConfig",
    "GaussianDecomposition",
    "PipelineConfig",
    "ScenarioConfig",
    "SequenceConfig",
    "Signal",
    "SpinDetector",
    "SpinParams",
    "coherence_multi",
    "coherence_single",
    "dip_frequency",
    "dip_position",
    "error_metric",
    "make_scenario",
    "match_spins",
    "params_from_slope_sigma",
    "sigma_from_params",
    "slope_from_params",
]
