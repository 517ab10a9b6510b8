"""Class-incremental learning for limited samples.

Exemplars are chosen by predicted cumulative entropy, the embedding space is
densified with transformation-generated virtual classes, and classification
uses cosine-similarity prototypes. See README.md for the experiment CLI.
"""

from .datamodel import (LabelSpace, RunConfig, Sample, SessionSchedule,
                        build_schedule, validate_label_spaces)
from .exceptions import ConfigError, DataError, FormatError, TrainingError
from .sessions import run_base_session, run_experiment, run_incremental_session

__all__ = [
    "ConfigError", "DataError", "FormatError", "TrainingError",
    "LabelSpace", "RunConfig", "Sample", "SessionSchedule",
    "build_schedule", "validate_label_spaces",
    "run_base_session", "run_incremental_session", "run_experiment",
]

__version__ = "0.1.0"
