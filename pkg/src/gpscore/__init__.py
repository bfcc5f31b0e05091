"""Time-varying skill ratings from pairwise comparisons.

Latent skill curves are Gaussian processes chosen through covariance
functions; outcomes of timestamped comparisons attach through exchangeable
likelihoods; fitting runs in linear time by recasting each curve as a
Gauss-Markov chain and iterating Gaussian pseudo-observation updates
(moment matching or reverse-KL) with Kalman smoothing.
"""

from .errors import ConfigError, DataError, NotFittedError
from .inference import FitConfig, FitReport, fit, log_marginal
from .kernels import (
    Constant,
    Kernel,
    Linear,
    Matern12,
    Matern32,
    PiecewiseConstant,
    Sum,
    Wiener,
    kernel_from_json,
)
from .likelihoods import (
    Gaussian,
    Likelihood,
    Logit,
    OrdinalProbit,
    PoissonExp,
    Probit,
    likelihood_from_json,
)
from .model import Model, Observation, interaction_feature, match_coeffs
from .statespace import FeatureChain, batch_posterior, build_chain

__version__ = "0.1.0"

__all__ = [
    "Model",
    "Observation",
    "FitConfig",
    "FitReport",
    "fit",
    "log_marginal",
    "Kernel",
    "Constant",
    "PiecewiseConstant",
    "Wiener",
    "Matern12",
    "Matern32",
    "Linear",
    "Sum",
    "kernel_from_json",
    "Likelihood",
    "Probit",
    "Logit",
    "OrdinalProbit",
    "PoissonExp",
    "Gaussian",
    "likelihood_from_json",
    "FeatureChain",
    "build_chain",
    "batch_posterior",
    "match_coeffs",
    "interaction_feature",
    "ConfigError",
    "DataError",
    "NotFittedError",
]
