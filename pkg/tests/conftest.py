import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from phase_data import SyntheticSpec, generate_synthetic, make_split, write_synthetic  # noqa: E402
from stage1_train import Stage1Config  # noqa: E402


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    """Six short 16x16 synthetic videos on disk: (root, dataset, videos, split)"""
    spec = SyntheticSpec(P=4, videos=6, mean_phase_length=4, seed=3, image_size=16)
    dataset = generate_synthetic(spec)
    root = str(tmp_path_factory.mktemp('tiny_synthetic'))
    videos = write_synthetic(dataset, root)
    split = make_split(videos, (3, 2, 1))
    return root, dataset, videos, split


@pytest.fixture
def toy_config():
    return Stage1Config(backbone='toy', feature_dim=16, token_dim=8, m=2, n=3, epochs=1,
                        lr=1e-3, lr_grid=(5e-4,), lr_search_epochs=1, batch_size=16,
                        resize=18, crop=16, eval_resize=16, init_from_names=False, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
