"""Semantic query-based data sourcing over random access channels.

Submodules: ``special`` (special functions), ``sensing`` (GMM world),
``query`` (projections and matching scores), ``channel`` (downlink outage and
IRSA/ALOHA uplink), ``matching`` (closed-form statistics and threshold
solvers), ``experiment`` (end-to-end Monte Carlo) and ``cli``.
"""

from .channel import ChannelParams, DegreeDistribution, IrsaConstants
from .experiment import ExperimentConfig, MetricsReport, estimate_metrics, run_trial
from .matching import MatchParams, ThresholdSolution, solve_threshold
from .sensing import GmmModel, reference_model

__version__ = "0.1.0"

__all__ = ["ChannelParams", "DegreeDistribution", "IrsaConstants", "ExperimentConfig",
           "MetricsReport", "estimate_metrics", "run_trial", "MatchParams",
           "ThresholdSolution", "solve_threshold", "GmmModel", "reference_model"]
