"""Shared fixtures: small regime models and example configurations."""
import numpy as np
import pytest

from smjd.semi_markov import (ExponentialHolding, RegimeModel, WeibullHolding)


@pytest.fixture
def single_regime():
    """Degenerate one-state model: no transitions ever occur."""
    return RegimeModel(kernel=np.array([[0.0]]),
                       holding=(ExponentialHolding(1.0),))


@pytest.fixture
def exp2_model():
    """Two states, exponential holding (rates 2 and 3), forced alternation."""
    return RegimeModel(kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                       holding=(ExponentialHolding(2.0), ExponentialHolding(3.0)))


@pytest.fixture
def weibull3_model():
    """Three states, Weibull holding, uniform off-diagonal kernel."""
    kernel = np.array([[0.0, 0.5, 0.5],
                       [0.5, 0.0, 0.5],
                       [0.5, 0.5, 0.0]])
    holding = (WeibullHolding(shape=1.5, scale=0.8),
               WeibullHolding(shape=2.0, scale=1.0),
               WeibullHolding(shape=1.2, scale=1.2))
    return RegimeModel(kernel=kernel, holding=holding)
