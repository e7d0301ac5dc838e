"""Robustness benchmarks for underdetermined inverse-problem solvers.

The package builds model-based and learned reconstruction maps for dense
compressed-sensing measurement models, searches for worst-case
measurement perturbations against them, and reduces the results to
noise-to-error curves that compare adversarial with statistical noise.
"""

from .autodiff import (
    SpdFactor,
    Tape,
    Var,
    evaluate_and_gradient,
    project_l2_ball,
    soft_threshold,
)
from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    NumericalError,
    RobustCSError,
    TrainingError,
    UnsupportedOperationError,
)
from .optim import AdamState, adam_init, adam_step

__version__ = "0.1.0"
