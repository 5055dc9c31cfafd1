"""
Global pytest configuration for the normdiff test suite.

This file contains common pytest configuration and hooks used across all test files.
"""

import pytest

# Import all fixtures to make them available for tests
from tests.fixtures import (
    rng, synth_config, synth_cohort, tiny_cohort, cohort_csv, schedule, mlp_config,
    saint_config, mlp_denoiser, saint_denoiser, run_config, oracle_run_config, stages, pipeline_graph,
    run_store,
)


def pytest_configure(config):
    """Configure pytest for the test suite."""
    # Register marks
    config.addinivalue_line("markers", "slow: long-running training and acceptance checks")
