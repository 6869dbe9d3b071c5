"""Latent-space restoration anomaly detection.

A VQ codec turns images into small discrete latent grids, a causal
autoregressive prior density-models those grids conditioned on slice
position, and anomaly scores come from the prior's NLL map: summed above a
threshold for sample-level detection, and used to resample unlikely latent
codes into healthy restorations for pixel-level localization.
"""

from .config import (RunConfig, config_from_dict, config_hash, config_to_dict,
                     load_config)
from .errors import (ConfigError, DataError, DivergenceError, MetricError,
                     MissingDependencyError, NonFiniteError, PipelineError,
                     ShapeError)

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "config_from_dict", "config_hash", "config_to_dict",
    "load_config",
    "PipelineError", "ConfigError", "ShapeError", "NonFiniteError",
    "DivergenceError", "MissingDependencyError", "DataError", "MetricError",
    "__version__",
]
