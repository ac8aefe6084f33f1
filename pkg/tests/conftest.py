import pytest
import torch

from fpflow.jets import DTYPE
from fpflow.settings import ProblemSpec
from training.model import build_field


@pytest.fixture(autouse=True)
def _float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(DTYPE)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def ou_spec():
    return ProblemSpec(kind="langevin", potential="quadratic", dim=2, eps=0.5, c=0.5)


@pytest.fixture
def uld_spec():
    return ProblemSpec(kind="uld", potential="quadratic", dim=1, gamma=1.0, beta=1.0)


@pytest.fixture
def small_field():
    return build_field(2, 2, width=8, seed=3)


@pytest.fixture
def small_second_order_field():
    return build_field(2, 1, width=8, seed=5)
