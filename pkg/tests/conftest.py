import numpy as np
import pytest

from nashlearn.components.costs import CostModel, EffortTerm, FormationTerm, GoalTerm
from nashlearn.components.dynamics import SingleIntegrator
from nashlearn.components.graph import CommGraph
from nashlearn.components.problem import GameProblem, RobotProblem
from nashlearn.forward import ShootingConfig

TIGHT = ShootingConfig(gamma=0.2, eps_u=1e-11, max_iters=20000)


def integrator_robot(i, x0, terms, weights, learnable=None, dt=0.5, gain=1.0, learn_gain=False):
    dynamics = SingleIntegrator(dim=len(x0), dt=dt, gain=gain, learn_gain=learn_gain)
    cost = CostModel(terms, weights, learnable)
    theta = np.concatenate([cost.default_theta(), dynamics.default_params()])
    return RobotProblem(i, dynamics, cost, x0, theta)


def lq_pair(T=3):
    """Two scalar integrators pulled to their own targets while holding a 0.5 gap."""
    robots = [
        integrator_robot(
            0,
            [0.0],
            [EffortTerm(), GoalTerm([1.0], dim=1), FormationTerm(1, [0.5], dim=1)],
            [0.5, 1.0, 0.3],
            [False, True, True],
        ),
        integrator_robot(
            1,
            [1.0],
            [EffortTerm(), GoalTerm([2.0], dim=1), FormationTerm(0, [-0.5], dim=1)],
            [0.5, 0.8, 0.3],
            [False, True, True],
        ),
    ]
    return GameProblem(CommGraph.line(2), robots, T, 0.5)


def lone_robot(theta=1.0, T=1):
    """``J = u^2 + theta (x^T - 1)^2`` with ``x+ = x + u``; ``u* = theta / (1 + theta)`` at T=1."""
    robot = integrator_robot(
        0,
        [0.0],
        [EffortTerm(), GoalTerm([1.0], dim=1)],
        [1.0, theta],
        [False, True],
        dt=1.0,
    )
    return GameProblem(CommGraph(1, []), [robot], T, 1.0)


@pytest.fixture
def small_lq():
    return lq_pair(T=3)


@pytest.fixture
def make_lq_pair():
    return lq_pair


@pytest.fixture
def make_lone_robot():
    return lone_robot


@pytest.fixture
def tight_cfg():
    return TIGHT
