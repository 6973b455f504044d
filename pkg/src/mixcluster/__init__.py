"""Moment-based learning of translated mixtures via implicit tensor projections.

The package splits into a moment/projection core (tensor_core,
poly_estimators, nested_projection, moment_pipeline), the Far/Close pair
test (sample_test), two learners (poincare_cluster for general 1-Poincare
mixtures, gaussian_cluster for the recursive Gaussian variant), synthetic
data generation (mixture_gen), and a CLI harness (cli).
"""

from .gaussian_cluster import ClusterParams, desk_params, recursive_cluster
from .mixture_gen import GenConfig, MixtureSampler, base_sampler, build_spec, sample_stream
from .moment_pipeline import MixtureSpec, ProjectionChain, iterative_projection
from .nested_projection import NestedProjection
from .poincare_cluster import LearnedMixture, learn_means
from .sample_test import TestConfig, choose_threshold, pair_test, test_sample

__all__ = [
    "ClusterParams",
    "GenConfig",
    "LearnedMixture",
    "MixtureSampler",
    "MixtureSpec",
    "NestedProjection",
    "ProjectionChain",
    "TestConfig",
    "base_sampler",
    "build_spec",
    "choose_threshold",
    "desk_params",
    "iterative_projection",
    "learn_means",
    "pair_test",
    "recursive_cluster",
    "sample_stream",
    "test_sample",
]

__version__ = "0.1.0"
