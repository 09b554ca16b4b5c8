import numpy as np
import pytest
import torch

from dist_ssl.clipset import generate_synthetic_dataset, split_labeled_unlabeled
from dist_ssl.config import parse_config

torch.set_num_threads(1)

TINY_CONFIG = """
[data]
num_clips = 96
labeled_fraction = 0.25
frame_size = 16
[model]
width = 8
[teacher]
epochs = 3
[student]
epochs = 3
[run]
seeds = [0]
"""


@pytest.fixture
def tiny_config():
    return parse_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def small_clipset():
    return generate_synthetic_dataset(32, 4, frames_per_clip=8, frame_size=16, difficulty=0.3, seed=3)


@pytest.fixture(scope="session")
def small_split(small_clipset):
    return split_labeled_unlabeled(small_clipset, 0.5, 0.25, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
