from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

from nashlearn.components.costs import CostModel
from nashlearn.components.dynamics import DynamicsModel
from nashlearn.components.graph import CommGraph
from nashlearn.errors import ConfigurationError, DivergenceError, ShapeError, TopologyError


def _frozen_array(value, shape=None, name="array"):
    arr = np.array(value, dtype=float)
    if shape is not None:
        try:
            arr = arr.reshape(shape)
        except ValueError:
            raise ShapeError("{} has shape {}, expected {}".format(name, arr.shape, shape))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        u = np.array(self.u, dtype=float)
        if x.ndim != 2 or u.ndim != 2:
            raise ShapeError("trajectory arrays must be 2-D (time, component)")
        if len(x) != len(u) + 1:
            raise ShapeError(
                "trajectory has {} states for {} inputs; expected T+1 and T".format(len(x), len(u))
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ShapeError("trajectory contains non-finite entries")
        object.__setattr__(self, "x", _frozen_array(x))
        object.__setattr__(self, "u", _frozen_array(u))

    @property
    def T(self):
        return len(self.u)

    def flat(self):
        """State entries ``x^0..x^T`` followed by input entries ``u^0..u^{T-1}``."""
        return np.concatenate([self.x.ravel(), self.u.ravel()])

    @classmethod
    def from_flat(cls, flat, n, mu, T):
        flat = np.asarray(flat, dtype=float)
        split = n * (T + 1)
        if len(flat) != split + mu * T:
            raise ShapeError("flat trajectory has length {}".format(len(flat)))
        return cls(flat[:split].reshape(T + 1, n), flat[split:].reshape(T, mu))

    def __repr__(self):
        return "<Trajectory T={} n={} mu={}>".format(self.T, self.x.shape[1], self.u.shape[1])


@dataclass(frozen=True, eq=False)
class RobotProblem:
    id: int
    dynamics: DynamicsModel
    cost: CostModel
    x0: np.ndarray
    theta: np.ndarray
    neighbors: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen_array(self.x0, (self.dynamics.n,), "x0"))
        if not np.all(np.isfinite(self.x0)):
            raise ConfigurationError("initial state of robot {} is not finite".format(self.id))
        expected = self.cost.n_learnable + self.dynamics.p
        theta = _frozen_array(self.theta, name="theta").ravel()
        theta.setflags(write=False)
        if len(theta) != expected:
            raise ShapeError(
                "robot {} has {} parameters, expected {}".format(self.id, len(theta), expected)
            )
        if expected < 1:
            raise ConfigurationError("robot {} has no learnable parameters".format(self.id))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "neighbors", tuple(sorted(self.neighbors)))

    @property
    def n(self):
        return self.dynamics.n

    @property
    def mu(self):
        return self.dynamics.mu

    @property
    def r(self):
        return len(self.theta)

    @property
    def theta_cost(self):
        return self.theta[: self.cost.n_learnable]

    @property
    def theta_dyn(self):
        return self.theta[self.cost.n_learnable :]

    def parameter_names(self):
        names = [
            "{}_{}".format(term.kind, k)
            for k, term in enumerate(self.cost.terms)
            if self.cost.learnable[k]
        ]
        return names + list(self.dynamics.param_names)

    def with_theta(self, theta):
        return replace(self, theta=theta)

    def step(self, x, u):
        return self.dynamics.step(x, u, self.theta_dyn)

    def running(self, t, x, u, xn, order=2):
        return self.cost.running(t, x, u, xn, self.theta_cost, order=order)

    def terminal(self, T, x, xn, order=2):
        return self.cost.terminal(T, x, xn, self.theta_cost, order=order)


@dataclass(frozen=True, eq=False)
class GameProblem:
    graph: CommGraph
    robots: Tuple[RobotProblem, ...]
    T: int
    dt: float

    def __post_init__(self):
        if int(self.T) < 1:
            raise ConfigurationError("horizon T must be at least 1, got {}".format(self.T))
        robots = tuple(self.robots)
        if len(robots) != self.graph.m:
            raise TopologyError(
                "{} robots for a graph of {} nodes".format(len(robots), self.graph.m)
            )
        bound = []
        for i, robot in enumerate(robots):
            if robot.id != i:
                raise TopologyError("robot at position {} has id {}".format(i, robot.id))
            neighbors = self.graph.neighbors(i)
            for j in robot.cost.neighbors:
                if j not in neighbors:
                    raise TopologyError(
                        "cost of robot {} couples to non-neighbour {}".format(i, j)
                    )
            bound.append(replace(robot, neighbors=neighbors))
        object.__setattr__(self, "robots", tuple(bound))
        object.__setattr__(self, "T", int(self.T))

    @property
    def m(self):
        return self.graph.m

    @property
    def ids(self):
        return self.graph.nodes

    def robot(self, i):
        return self.robots[i]

    @property
    def r(self):
        return sum(robot.r for robot in self.robots)

    @property
    def theta(self):
        return np.concatenate([robot.theta for robot in self.robots])

    @property
    def theta_slices(self):
        slices, start = {}, 0
        for robot in self.robots:
            slices[robot.id] = slice(start, start + robot.r)
            start += robot.r
        return slices

    def with_theta(self, theta):
        """New game with θ replaced; accepts the stacked Θ or a map id -> θ_i."""
        if not isinstance(theta, dict):
            theta = np.asarray(theta, dtype=float)
            if len(theta) != self.r:
                raise ShapeError("expected {} parameters, got {}".format(self.r, len(theta)))
            theta = {i: theta[s] for i, s in self.theta_slices.items()}
        robots = tuple(
            robot.with_theta(theta[robot.id]) if robot.id in theta else robot
            for robot in self.robots
        )
        return replace(self, robots=robots)

    def is_lq(self):
        return all(r.dynamics.linear and r.cost.is_quadratic() for r in self.robots)

    def zero_inputs(self):
        return {robot.id: np.zeros((self.T, robot.mu)) for robot in self.robots}


def rollout(robot, u, T=None):
    """Roll the dynamics forward from ``robot.x0`` under inputs ``u``."""
    u = np.asarray(u, dtype=float)
    if T is None:
        T = len(u)
    if u.shape != (T, robot.mu):
        raise ShapeError("inputs have shape {}, expected {}".format(u.shape, (T, robot.mu)))
    x = np.zeros((T + 1, robot.n))
    x[0] = robot.x0
    for t in range(T):
        x[t + 1] = robot.step(x[t], u[t])
        if not np.all(np.isfinite(x[t + 1])):
            raise DivergenceError(
                "robot {} state became non-finite at t={}".format(robot.id, t + 1), step=t + 1
            )
    return x


def check_neighbors(robot, neighbor_x):
    if set(neighbor_x) != set(robot.neighbors):
        raise TopologyError(
            "robot {} needs neighbour states for {}, got {}".format(
                robot.id, list(robot.neighbors), sorted(neighbor_x)
            )
        )


def neighbor_states_at(neighbor_x, t):
    return {j: seq[t] for j, seq in neighbor_x.items()}


def eval_objective(robot, xi, neighbor_x):
    """``J_i`` for trajectory ``xi`` given every neighbour's state sequence."""
    check_neighbors(robot, neighbor_x)
    T = xi.T
    for j, seq in neighbor_x.items():
        if len(seq) != T + 1:
            raise ShapeError("neighbour {} sequence has length {}".format(j, len(seq)))
    total = 0.0
    for t in range(T):
        xn = neighbor_states_at(neighbor_x, t)
        total += robot.running(t, xi.x[t], xi.u[t], xn, order=0).value
    total += robot.terminal(T, xi.x[T], neighbor_states_at(neighbor_x, T), order=0).value
    return total
