"""Pytest configuration and common fixtures."""

from unittest.mock import Mock

import numpy as np
import pytest

from mutadetect import numcore as nc
from mutadetect.config import RunConfig
from mutadetect.dataset import SiteSample
from mutadetect.sequences import SequenceRecord, TimeCohort


@pytest.fixture(autouse=True)
def clean_tape():
    """Start and finish every test with an empty tape on this thread."""
    nc.current_tape().clear()
    yield
    nc.current_tape().clear()


@pytest.fixture
def rng():
    """Provide a seeded generator."""
    return np.random.default_rng(12345)


@pytest.fixture
def mock_logger():
    """Provide mock logger for testing."""
    logger = Mock()
    logger.info = Mock()
    logger.error = Mock()
    logger.warning = Mock()
    logger.debug = Mock()
    logger.critical = Mock()
    return logger


@pytest.fixture
def mock_settings():
    """Provide mock settings for testing."""
    settings = Mock()
    settings.PYTHON_LOG_LEVEL = "INFO"
    settings.MUTADETECT_THREADS = 2
    settings.MUTADETECT_OUTPUT_DIR = "runs"
    return settings


@pytest.fixture
def small_cohort():
    """Three length-12 records sharing one time step."""
    return TimeCohort(
        2001,
        (
            SequenceRecord("a", 2001, "ACDEFGHIKLMN"),
            SequenceRecord("b", 2001, "ACDEFGHIKLMQ"),
            SequenceRecord("c", 2001, "PQRSTVWYACDE"),
        ),
    )


def make_samples(n_normal, n_mutated, T=3, dim=4, seed=0, gap=3.0):
    """Separable samples: normals near 0, mutated shifted by `gap`."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_normal + n_mutated):
        mutated = i >= n_normal
        inputs = rng.normal(scale=0.1, size=(T, dim)) + (gap if mutated else 0.0)
        samples.append(
            SiteSample(
                position=2 + i % 3,
                inputs=inputs,
                label=0 if mutated else 1,
                chain_id="2005:0",
                draw=i,
                window_end=2005,
            )
        )
    return samples


@pytest.fixture
def separable_samples():
    return make_samples


@pytest.fixture
def tiny_run_config(tmp_path):
    """Run config sized for fast end-to-end runs."""
    return RunConfig.model_validate(
        {
            "seed": 7,
            "paths": {"corpus": str(tmp_path / "synth" / "corpus.csv"), "output_dir": str(tmp_path / "run")},
            "dataset": {"k": 2, "draws": 3, "kmeans_restarts": 2},
            "embedding": {"dim": 6},
            "train": {
                "T": 3,
                "epochs": 2,
                "trials": 2,
                "hidden": 6,
                "attention_size": 4,
                "out_dim": 3,
                "batch_size": 32,
            },
        }
    )
