import math

import numpy as np
import pytest

from fbsde_is.model import ProblemSpec, constant_diffusion, whole_space, zero_running_cost

# E[exp(-X_1^2)] for dX = -X dt + dB, X_0 = 1: X_1 ~ N(e^-1, (1 - e^-2)/2)
OU_MEAN = math.exp(-1.0)
OU_VAR = 0.5 * (1.0 - math.exp(-2.0))
OU_GAMMA = 0.5 * math.log(1.0 + 2.0 * OU_VAR) + OU_MEAN ** 2 / (1.0 + 2.0 * OU_VAR)


def ou_problem(drift_shift: float = 0.0, horizon: float = 1.0, terminal="square") -> ProblemSpec:
    if terminal == "square":
        g, dg = (lambda x: x[:, 0] ** 2), (lambda x: 2.0 * x)
    else:
        g, dg = (lambda x: x[:, 0]), (lambda x: np.ones_like(x))
    return ProblemSpec(
        dim=1, noise_dim=1,
        drift=lambda x, t: -x + drift_shift,
        diffusion=constant_diffusion([[1.0]]),
        running_cost=zero_running_cost,
        terminal_cost=g,
        domain_indicator=whole_space,
        horizon=horizon,
        terminal_cost_grad=dg,
        name="ou",
    )


@pytest.fixture
def ou():
    return ou_problem()
