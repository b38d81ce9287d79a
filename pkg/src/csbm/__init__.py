"""Bayes-optimal inference for the contextual stochastic block model."""
from .errors import CSBMError, InvalidParameterError, NonFiniteError, ResourceBudgetError
from .model import (
    Affinity,
    Instance,
    ModelParams,
    MultiParams,
    Supervision,
    affinity_from_snr,
    detectability_threshold,
    make_supervision,
    params_from_phi_eps,
    phi_eps_from_params,
    sample_instance,
    sample_multi_instance,
)

__version__ = "0.1.0"
