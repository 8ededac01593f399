import numpy as np
import pytest
import torch

from inloc import data as dc
from inloc import surrogate as sg

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def box():
    return sg.BoxConfig()


@pytest.fixture(scope="session")
def modes(box):
    return sg.cavity_mode_table(box)


@pytest.fixture(scope="session")
def source_shift():
    return sg.DomainShiftConfig.source_defaults()


@pytest.fixture(scope="session")
def target_shift():
    return sg.DomainShiftConfig.target_defaults()


@pytest.fixture(scope="session")
def source_bundle(box, modes, source_shift):
    """Full 512-sample source-domain bundle (50 mm grid)."""
    return sg.generate_dataset(sg.make_source_grid(50.0, box), box, modes, source_shift)


@pytest.fixture(scope="session")
def target_bundle(box, modes, target_shift):
    """Full 64-sample pseudo-real bundle (100 mm grid)."""
    return sg.generate_dataset(sg.make_source_grid(100.0, box), box, modes, target_shift)


@pytest.fixture(scope="session")
def tiny_target_bundle(box, modes, target_shift):
    """8-sample bundle (200 mm grid), one sample per octant."""
    return sg.generate_dataset(sg.make_source_grid(200.0, box), box, modes, target_shift)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def normalized(bundle):
    lo, hi = dc.compute_normalization(bundle)
    return dc.normalize_bundle(bundle, lo, hi)


@pytest.fixture(scope="session")
def norm_source(source_bundle):
    return normalized(source_bundle)


@pytest.fixture(scope="session")
def norm_tiny_target(tiny_target_bundle):
    return normalized(tiny_target_bundle)
