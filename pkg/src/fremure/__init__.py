"""Frequency-guided multi-level relation reasoning.

A self-contained library for training relation predictors on per-frame
subject/object features: a frequency-aware feature gate, a dual-branch
position-aware predicate embedder, uncertainty-carrying classification heads,
and a three-task model with decoupled or shared trunks, plus synthetic
long-tail data and recall metrics. ``fremure.cli`` drives end-to-end runs.
"""

from . import numcore
from .errors import ConfigError, ContractError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "numcore",
    "ConfigError",
    "ContractError",
    "NumericalError",
    "__version__",
]
