"""Shared fixtures: a small trained base model and oracle-driven stores.

The trained fixtures use deliberately reduced budgets so the whole suite
stays fast; acceptance tests build their own full-size pipeline.
"""

import numpy as np
import pytest

from agd.diffusion import data as D
from agd.diffusion import denoiser as dn
from agd.diffusion.sampling import OracleDenoiser
from agd.diffusion.schedule import NoiseSchedule


@pytest.fixture(scope="session")
def ring_ds():
    return D.ring_dataset()


@pytest.fixture(scope="session")
def small_schedule():
    return NoiseSchedule(num_steps=16)


@pytest.fixture(scope="session")
def oracle_teacher(ring_ds):
    return OracleDenoiser(ring_ds)


@pytest.fixture(scope="session")
def tiny_base(ring_ds, small_schedule):
    """A quickly trained, frozen base model for wiring-level tests."""
    cfg = dn.BaseTrainConfig(hidden=(48, 48), steps=600, batch=96, peak_lr=2e-3)
    model, _ = dn.train_base(ring_ds, small_schedule, cfg, seed=900)
    return model.freeze()
