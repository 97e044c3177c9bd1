"""Variational Bayes for Poisson and logistic GLMMs with partial noncentering."""

from .engine import FitOptions, fit, lmm_fit
from .errors import DomainError, NumericalError, ShapeError, SPDError, ValidationError, VbGlmmError
from .initialization import default_prior, glm_irls, init_state, prior_scale_from_data
from .model import ClusterData, Dataset, Family, FitResult, Parametrization, PriorSpec, VariationalState

__version__ = "0.1.0"
