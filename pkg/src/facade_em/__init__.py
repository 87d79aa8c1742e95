"""facade-em -
Facade registration and joint semantic segmentation with Lp Gaussian mixtures."""

# Version information
try:
    from ._version import version as __version__
except ImportError:
    __version__ = "0.1.0"

# Package metadata
__title__ = "facade-em"
__description__ = """MAP-EM registration of a facade model of Lp Gaussians
onto per-pixel label probabilities, with posterior segmentation"""
__author__ = "Your Name"
__author_email__ = "your.email@example.com"
__license__ = "GPL-3.0-or-later"
__url__ = "https://github.com/yourusername/facade-em"

# Public API
from .config import Config, EmConfig
from .em import Box, EMRegistrar, EmReport, init_from_box
from .errors import (
    ConvergenceError,
    FacadeEMError,
    FormatError,
    ValidationError,
)
from .evaluation import RegError, evaluate, grid_oracle, registration_error
from .model import (
    LabelProbMap,
    LabelSet,
    LpComponent,
    LpMixtureModel,
    PointSet,
    Similarity,
    TransformState,
    map_objective,
)
from .pipeline import FacadeRegistrationPipeline
from .points import extract_points
from .posterior import posterior_labels, render_posterior_map
from .reference import ReferenceModelBuilder, ReferenceSegmentation, build_model
from .synth import SynthSpec, generate_instance

# Package constants
DEFAULT_P = 4
DEFAULT_EPSILON = 0.1  # px
DEFAULT_THRESHOLD = 0.01
DEFAULT_STRIDE = 2

__all__ = [
    # Version and metadata
    "__version__",
    "__title__",
    "__description__",
    "__author__",
    "__author_email__",
    "__license__",
    "__url__",
    # Main classes
    "Config",
    "EmConfig",
    "Box",
    "EMRegistrar",
    "EmReport",
    "FacadeRegistrationPipeline",
    "LabelProbMap",
    "LabelSet",
    "LpComponent",
    "LpMixtureModel",
    "PointSet",
    "ReferenceModelBuilder",
    "ReferenceSegmentation",
    "RegError",
    "Similarity",
    "SynthSpec",
    "TransformState",
    # Functions
    "build_model",
    "evaluate",
    "extract_points",
    "generate_instance",
    "grid_oracle",
    "init_from_box",
    "map_objective",
    "posterior_labels",
    "registration_error",
    "render_posterior_map",
    # Errors
    "FacadeEMError",
    "ValidationError",
    "FormatError",
    "ConvergenceError",
    # Constants
    "DEFAULT_P",
    "DEFAULT_EPSILON",
    "DEFAULT_THRESHOLD",
    "DEFAULT_STRIDE",
]


def create_default_config(**kwargs) -> EmConfig:  # type: ignore[no-untyped-def]
    """
    Create a default registration configuration.

    Args:
        **kwargs: Override default EmConfig values

    Returns:
        EmConfig: Validated configuration
    """
    defaults = {
        "p": DEFAULT_P,
        "epsilon": DEFAULT_EPSILON,
        "threshold": DEFAULT_THRESHOLD,
        "stride": DEFAULT_STRIDE,
    }
    defaults.update(kwargs)
    return EmConfig(**defaults)  # type: ignore[arg-type]
