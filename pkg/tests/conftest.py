import os
import sys

# fixed BLAS thread count, before numpy is imported
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

sys.path.insert(1, "/".join(os.path.realpath(__file__).split("/")[0:-2]))

from prune_pipeline import *


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_graph():
    return build("toy-cnn", num_classes=4, input_shape=(3, 16, 16))


@pytest.fixture(scope="session")
def small_synth():
    return synth_dataset(seed=0, n_train=64, n_eval=32, classes=4, size=16)


@pytest.fixture
def quiet_config():
    return RunConfig(epochs=2, batch_size=16, retrain_epochs=1, progress=False)


def random_checkpoint(graph, seed=0):
    """Initialized checkpoint with randomized batchnorm terms so that every
    tensor carries information."""
    ckpt = init_params(graph, seed)
    rng = np.random.default_rng(seed + 1000)
    updates = {}
    for name, t in ckpt.tensors.items():
        if name.endswith((".gamma", ".running_var")):
            updates[name] = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith((".beta", ".running_mean", ".bias")):
            updates[name] = rng.normal(0.0, 0.1, t.shape)
    return ckpt.with_tensors(updates)


@pytest.fixture
def make_checkpoint():
    return random_checkpoint
