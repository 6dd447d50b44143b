"""Transition matching on toy distributions: processes, variants, oracles and checks."""

from .datasets import DatasetSpec, sample_dataset
from .oracle import GmmTarget, gaussian_posterior_sample, gmm_marginal_velocity, mc_conditional_expectation
from .processes import Scheduler, State, full_history_sample, independent_linear_pair, linear_pair
from .rng import rng_stream
from .variants import VariantConfig, init_train_state, sample, train_step

__version__ = "0.1.0"
