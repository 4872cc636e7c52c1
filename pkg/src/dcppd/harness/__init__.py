"""Configuration, run records, experiment steps and the ``dcppd`` command line."""
from .config import CUE_SOURCES, SCHEMA, TEST_SETTINGS, ConfigError, ExperimentConfig, load_config
from .runs import MissingArtifactError, RunExistsError, RunStore
