"""Probabilistic travel-time estimation with low-rank link embeddings."""
from .data import Batch, SubTripSet, Trip, load_trips, make_batches, save_trips, subsample
from .errors import NumericalError, ProbTTEError, ValidationError
from .inference import GaussianPrediction, PosteriorState, condition, predict, predict_prior, predict_trip
from .metrics import MetricsReport, crps_gaussian, score
from .model import ModelParams, grad_nll, init_params, nll, nll_dense
from .network import ContractionMap, RoadNetwork, load_network, save_network
from .training import TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "ContractionMap", "GaussianPrediction", "MetricsReport", "ModelParams",
    "NumericalError", "PosteriorState", "ProbTTEError", "RoadNetwork", "SubTripSet",
    "TrainConfig", "TrainReport", "Trip", "ValidationError", "condition", "crps_gaussian",
    "evaluate", "grad_nll", "init_params", "load_network", "load_trips", "make_batches",
    "nll", "nll_dense", "predict", "predict_prior", "predict_trip", "save_network",
    "save_trips", "score", "subsample", "train",
]
