import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    """Two-blob source and target training sets plus held-out batches."""
    from dsbridge.datasets import gen_toy

    return {
        "source": gen_toy("blobs-a", 2048, 0, "source/train"),
        "target": gen_toy("blobs-b", 2048, 0, "target/train"),
        "source_test": gen_toy("blobs-a", 512, 0, "source/test"),
        "target_test": gen_toy("blobs-b", 2048, 0, "target/test"),
    }


@pytest.fixture(scope="session")
def blob_model(blobs):
    from dsbridge.denoiser import TrainConfig, train

    return train(blobs["source"], blobs["target"], TrainConfig(steps=5000, seed=0))
