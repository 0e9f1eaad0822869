"""Stratified mixture posteriors and importance-weighted evidence bounds."""

from . import tensor_ad
from .distributions import (
    DiagonalGaussian,
    FullCovGaussian,
    Mixture,
    StandardNormal,
    TrainableMixturePrior,
    mixture_sample_ancestral,
    mixture_sample_batch,
    rng_stream,
    stratified_expectation,
)
from .estimators import BoundValue, EstimatorConfig, Kind, estimate
from .models import ModelSpec, build_model
from .training import TrainConfig, train

__version__ = "0.1.0"
