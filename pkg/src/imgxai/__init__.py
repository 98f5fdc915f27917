"""Two-stage explainable image-on-image regression.

Stage one embeds each subject's network with a latent distance model fit
by MCMC. Stage two regresses outcome images on predictor images and the
node embeddings with dropout networks, whose MC-dropout draws give
posterior inference for the spatially varying coefficients, the network
effect and predictions.
"""

from .data import SpatialDataset, Standardization, standardize
from .errors import ConfigError, NumericError, ValidationError, XaiError
from .latent_network import McmcConfig, NetworkObservation, NodeFeatures, embed_network, mcmc_fit
from .metrics import bayes_r2, benchmark, coverage_and_length, glm_baseline, rmspe
from .simgen import GpSpec, ScenarioSpec, generate_scenario, get_scenario, scenario_catalog
from .xai_model import (PosteriorDraws, TrainedModel, XaiConfig, fit_xai, mc_dropout_draws,
                        posterior_predictive)

__version__ = "0.1.0"
