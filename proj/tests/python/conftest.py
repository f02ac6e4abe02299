import numpy as np
import pytest

TINY_CONFIG = """
seed = 3
[data]
synthetic_train = 1
[network]
classes = 2
ratios = 1 0.5 0.5 0.5 0.5
widths = 4 8 8 16 16
k1 = 8
k2 = 16
k_eig = 8
propagate_k = 8
[train]
epochs = 2
batch = 2
steps_per_epoch = 2
column_points = 128
column_section = 1.5
threads = 1
[eval]
column_points = 128
column_section = 1.5
"""


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def rng():
    return np.random.default_rng(0)
