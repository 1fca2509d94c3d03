import numpy as np
import pytest

from causalzoo import nn_engine as ne
from causalzoo import zoo


@pytest.fixture(scope="session")
def small_tanh_arch():
    return ne.ArchitectureSpec(input_shape=(8, 8, 1),
                               conv_layers=((3, 4, 2), (3, 4, 2)),
                               num_classes=3, activation="tanh")


@pytest.fixture(scope="session")
def default_arch():
    return ne.ArchitectureSpec()


@pytest.fixture(scope="session")
def blobs_dataset():
    spec = zoo.DatasetSpec(kind="synthetic_blobs_2d", num_classes=2, size=200,
                           generation_seed=3)
    return zoo.generate_dataset(spec)


def random_params(arch, seed, std=0.3):
    return ne.init_parameters(arch, "normal", std, "normal", seed)


def params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.tensors, b.tensors))


def rel_err(analytic, reference, floor=1e-6):
    return abs(analytic - reference) / max(abs(analytic), abs(reference), floor)
