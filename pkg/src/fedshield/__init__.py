"""Simulator for privacy-preserving federated next-word-prediction training:
federated rounds, Secure Aggregation, distributed DP and DP-FTRL with
user-level zCDP accounting."""

from .config import ConfigError, ExperimentConfig, load_config
from .corpus import LocalDataset, Vocabulary
from .dpftrl import PrivacyLedger, Verdict, account_zcdp, check_budget, zcdp_to_eps
from .estimators import FederatedNextWordPredictor, NextWordPredictor, StochasticQuantizer
from .experiment import ExperimentResult, account, compare, run_experiment
from .model import Architecture, MetricsReport

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "FederatedNextWordPredictor",
    "LocalDataset",
    "MetricsReport",
    "NextWordPredictor",
    "PrivacyLedger",
    "StochasticQuantizer",
    "Verdict",
    "Vocabulary",
    "account",
    "account_zcdp",
    "check_budget",
    "compare",
    "load_config",
    "run_experiment",
    "zcdp_to_eps",
]
