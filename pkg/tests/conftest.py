import numpy as np
import pytest
import torch

from petseg.phantom import PhantomSpec, generate_phantom


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture(scope="session")
def small_case():
    """A small 3 mm phantom with one well-separated lesion."""
    spec = PhantomSpec(
        shape=(48, 32, 32),
        spacing=(3.0, 3.0, 3.0),
        n_lesions=1,
        lesion_radius_range=(8.0, 10.0),
        lesion_suv_range=(8.0, 16.0),
        rng_seed=11,
    )
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def multi_lesion_case():
    spec = PhantomSpec(
        shape=(64, 48, 48),
        spacing=(3.0, 3.0, 3.0),
        n_lesions=3,
        lesion_radius_range=(7.0, 11.0),
        rng_seed=5,
    )
    return generate_phantom(spec)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
