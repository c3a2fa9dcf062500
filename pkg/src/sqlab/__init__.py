"""Simulate adaptive statistical-query analysis against naive and differentially private oracles."""

__version__ = "0.1.0"

from sqlab.core import Dataset, Population, Query, Transcript, Universe, empirical_mean, true_expectation  # noqa: E402
from sqlab.mechanisms import OracleConfig, open_session  # noqa: E402
from sqlab.privacy import PrivacyParams, required_sample_size  # noqa: E402

__all__ = [
    "Dataset", "Population", "Query", "Transcript", "Universe", "empirical_mean", "true_expectation",
    "OracleConfig", "open_session", "PrivacyParams", "required_sample_size", "__version__",
]
