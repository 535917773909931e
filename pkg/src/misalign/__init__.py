"""Bayesian hierarchical prediction at misaligned areal units with a hybrid
Moran-eigenvector x bi-square spatial basis."""

from .basis import HybridBasis, JitterPolicy, KnotSet, bisquare_basis, hybrid_basis, place_knots
from .evaluate import StudyReport, dic, rmse_ci
from .geometry import ArealLayer, ArealUnit, build_adjacency, build_grid_layer, laplacian, load_geojson_layer, load_layer
from .model import ChainState, ModelSpec, PriorSpec, log_joint
from .predict import PredictionResult, build_prediction_basis, predictive_draws
from .sampler import PosteriorSamples, SamplerConfig, run_baseline_hughes_haran, run_chain
from .simulate import SimConfig, run_study, simulate_from_model

__version__ = "0.1.0"
