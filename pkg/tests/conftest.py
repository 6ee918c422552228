import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from survdtr.dataset import Dataset, stage_index

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(rng, n=30, M=2, p=4, K=3, width=1.0, horizon=None, event_rate=0.6):
    """Small synthetic sample: exponential times, uniform treatments, normal covariates."""
    boundaries = tuple(width * m for m in range(M))
    horizon = width * M if horizon is None else horizon
    time = rng.uniform(0.01, horizon, size=n)
    event = rng.random(n) < event_rate
    n_stages = stage_index(time, boundaries)
    mask = np.arange(1, M + 1)[None, :] <= n_stages[:, None]
    X = np.where(mask[:, :, None], rng.normal(size=(n, M, p)), 0.0)
    A = np.where(mask, rng.integers(1, K + 1, size=(n, M)), 0)
    return Dataset(
        ids=np.array([f"id{i:03d}" for i in range(n)], dtype=object),
        time=time,
        event=event,
        covariates=X,
        treatments=A,
        K=K,
        stage_boundaries=boundaries,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
