"""Pytest configuration and fixtures"""

import os

import numpy as np
import pytest

from specfm.config import EncoderConfig, PreprocessConfig, SynthConfig
from specfm.ms_io import Spectrum
from specfm.synthgen import gen_dataset

slow = pytest.mark.skipif(
    os.getenv("SPECFM_RUN_SLOW") != "1",
    reason="desk-scale training run; set SPECFM_RUN_SLOW=1 to enable",
)


@pytest.fixture
def tiny_encoder_cfg():
    """Smallest encoder the gradient checks run on"""
    return EncoderConfig(d_model=8, n_layers=1, n_heads=1, ff_dim=16)


@pytest.fixture
def small_encoder_cfg():
    return EncoderConfig(d_model=16, n_layers=1, n_heads=2, ff_dim=32)


@pytest.fixture
def preprocess_cfg():
    return PreprocessConfig()


@pytest.fixture
def sample_spectrum():
    """Fixture providing a small three-peak spectrum"""
    return Spectrum.from_peaks("run1", "scan=1", 501.0, 2, [300.0, 100.0, 200.0], [9.0, 1.0, 16.0])


@pytest.fixture
def synth_records():
    """Build synthetic records for a task: synth_records("phospho", n=50, seed=3)"""

    def build(task: str, n: int = 50, seed: int = 0, **overrides):
        return gen_dataset(SynthConfig(task=task, n=n, seed=seed, **overrides))

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
