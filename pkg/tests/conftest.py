"""Shared test configuration; keeps the tests directory importable."""

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _quiet_numpy_errors():
    with np.errstate(divide="ignore", invalid="ignore"):
        yield
