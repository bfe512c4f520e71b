import numpy as np
import pytest
from hypothesis import settings

import ulab

settings.register_profile("ci", deadline=None, max_examples=30)
settings.load_profile("ci")


@pytest.fixture
def blobs4():
    """Well-separated 4-class blobs, small enough for exhaustive oracles."""
    return ulab.generate_blobs(4, 25, 6, spread=0.35, seed=101)


@pytest.fixture
def trained4(blobs4):
    arch = ulab.Architecture("logistic", 6, 4)
    cfg = ulab.TrainConfig(epochs=6, batch_size=25, seed=7)
    return ulab.train_gold(blobs4, arch, cfg), blobs4, cfg


@pytest.fixture
def six_sample_fixture():
    """Tiny ridge-logistic setup: 6 samples, 2 classes, 3 features (p = 8)."""
    rng = np.random.default_rng(42)
    samples = []
    for label in (0, 0, 0, 1, 1, 1):
        feats = rng.normal(loc=2.0 * label, scale=1.0, size=3)
        samples.append(ulab.make_sample(feats, label))
    d = ulab.Dataset(samples, num_classes=2, feature_dim=3)
    arch = ulab.Architecture("logistic", 3, 2)
    cfg = ulab.TrainConfig(
        epochs=200, learning_rate=0.1, batch_size=6, optimizer="sgd",
        ridge=0.1, seed=5,
    )
    m = ulab.train(ulab.init(arch), d, cfg)
    return m, d, cfg
