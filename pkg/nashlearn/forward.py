"""Distributed shooting-based Nash-equilibrium seeking.

Each round every robot rolls out its dynamics, swaps its state sequence with
its neighbours, runs the costate recursion backwards and steps its inputs
against the stationarity residual ``dc/du + (df/du)' lambda``.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from nashlearn.components.problem import (
    Trajectory,
    check_neighbors,
    eval_objective,
    neighbor_states_at,
    rollout,
)
from nashlearn.errors import ConfigurationError, DivergenceError, ShapeError
from nashlearn.fabric import CommFabric

logger = logging.getLogger(__name__)

# objective changes below this relative size are rounding noise
OBJECTIVE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class CostateTrajectory:
    """Costates ``lambda^1..lambda^T``; row ``t`` holds ``lambda^{t+1}``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ShapeError("costates must be a (T, n) array")
        if not np.all(np.isfinite(values)):
            raise ShapeError("costates contain non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def T(self):
        return len(self.values)

    def at(self, t):
        if not 1 <= t <= self.T:
            raise IndexError("costate index {} outside 1..{}".format(t, self.T))
        return self.values[t - 1]

    def next_of(self, t):
        """``lambda^{t+1}``, the multiplier paired with step ``t``."""
        return self.values[t]


@dataclass
class ShootingConfig:
    gamma: float = 1e-2
    eps_u: float = 1e-4
    max_iters: int = 5000
    backtracking: bool = False
    shrink: float = 0.5
    armijo: float = 0.5
    max_backtracks: int = 30
    robot_gamma: Dict[int, float] = field(default_factory=dict)
    log_every: int = 100

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive, got {}".format(self.gamma))
        if self.eps_u <= 0:
            raise ConfigurationError("eps_u must be positive, got {}".format(self.eps_u))
        if not 0 < self.shrink < 1:
            raise ConfigurationError("shrink must lie in (0, 1), got {}".format(self.shrink))
        if not 0 <= self.armijo < 1:
            raise ConfigurationError("armijo must lie in [0, 1), got {}".format(self.armijo))
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")
        for i, gamma in self.robot_gamma.items():
            if gamma <= 0:
                raise ConfigurationError("gamma of robot {} must be positive".format(i))

    def gamma_for(self, i):
        return self.robot_gamma.get(i, self.gamma)

    def tightened(self, factor=100.0):
        return ShootingConfig(
            gamma=self.gamma,
            eps_u=self.eps_u / factor,
            max_iters=self.max_iters * 10,
            backtracking=self.backtracking,
            shrink=self.shrink,
            armijo=self.armijo,
            max_backtracks=self.max_backtracks,
            robot_gamma=dict(self.robot_gamma),
            log_every=self.log_every,
        )


@dataclass
class NashSolution:
    trajectories: Dict[int, Trajectory]
    costates: Dict[int, CostateTrajectory]
    residual_history: List[float] = field(default_factory=list)
    robot_residual_history: List[Dict[int, float]] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def final_residual(self):
        return self.residual_history[-1] if self.residual_history else float("nan")

    def inputs(self):
        return {i: np.array(xi.u) for i, xi in self.trajectories.items()}

    def states(self):
        return {i: xi.x for i, xi in self.trajectories.items()}

    def neighbor_states(self, robot):
        return {j: self.trajectories[j].x for j in robot.neighbors}

    def to_json(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.final_residual,
        }


def hamiltonian(robot, t, x, u, neighbor_x, lambda_next):
    """``c_i^t + f_i' lambda^{t+1}``; ``neighbor_x`` maps neighbour ids to states at ``t``."""
    cost = robot.running(t, x, u, neighbor_x, order=0)
    return cost.value + robot.step(x, u) @ np.asarray(lambda_next, dtype=float)


def backward_costates(robot, x_seq, u_seq, neighbor_x):
    """Run ``lambda^T = dh/dx^T``, then ``lambda^t = dc/dx + (df/dx)' lambda^{t+1}`` to t = 1."""
    check_neighbors(robot, neighbor_x)
    T = len(u_seq)
    lam = np.zeros((T, robot.n))
    lam[T - 1] = robot.terminal(T, x_seq[T], neighbor_states_at(neighbor_x, T), order=1).gx
    for t in range(T - 1, 0, -1):
        cost = robot.running(t, x_seq[t], u_seq[t], neighbor_states_at(neighbor_x, t), order=1)
        fx = robot.dynamics.jacobians(x_seq[t], u_seq[t], robot.theta_dyn).fx
        lam[t - 1] = cost.gx + fx.T @ lam[t]
        if not np.all(np.isfinite(lam[t - 1])):
            raise DivergenceError(
                "robot {} costate became non-finite at t={}".format(robot.id, t), step=t
            )
    if not np.all(np.isfinite(lam[T - 1])):
        raise DivergenceError(
            "robot {} terminal costate is non-finite".format(robot.id), step=T
        )
    return CostateTrajectory(lam)


def input_gradient(robot, t, x, u, neighbor_x, lambda_next):
    """Stationarity residual ``dc/du + (df/du)' lambda^{t+1}`` at step ``t``."""
    cost = robot.running(t, x, u, neighbor_x, order=1)
    fu = robot.dynamics.jacobians(x, u, robot.theta_dyn).fu
    return cost.gu + fu.T @ np.asarray(lambda_next, dtype=float)


def input_gradients(robot, x_seq, u_seq, neighbor_x, costates):
    T = len(u_seq)
    return np.array(
        [
            input_gradient(
                robot,
                t,
                x_seq[t],
                u_seq[t],
                neighbor_states_at(neighbor_x, t),
                costates.next_of(t),
            )
            for t in range(T)
        ]
    ).reshape(T, robot.mu)


def _local_step(robot, u, grad, gamma, neighbor_x, cfg):
    """Return ``(u_next, gamma)``.

    With backtracking, ``gamma`` shrinks until the local objective drops by at
    least ``armijo * gamma * |grad|^2``.
    """
    candidate = u - gamma * grad
    if not cfg.backtracking:
        return candidate, gamma
    T = len(u)
    current = eval_objective(robot, Trajectory(rollout(robot, u, T), u), neighbor_x)
    slope = cfg.armijo * float(np.sum(grad * grad))
    for _ in range(cfg.max_backtracks):
        try:
            trial = eval_objective(
                robot, Trajectory(rollout(robot, candidate, T), candidate), neighbor_x
            )
        except (DivergenceError, ShapeError):
            trial = np.inf
        if trial <= current - gamma * slope + OBJECTIVE_RTOL * (1.0 + abs(current)):
            return candidate, gamma
        gamma *= cfg.shrink
        candidate = u - gamma * grad
    logger.warning("robot %s exhausted backtracking (gamma=%g)", robot.id, gamma)
    return candidate, gamma


def solve_nash(game, init_u=None, cfg=None, fabric=None):
    """Seek the Nash equilibrium of ``game`` by distributed shooting."""
    cfg = cfg or ShootingConfig()
    fabric = fabric or CommFabric(game.graph)
    T = game.T
    u = {}
    init_u = init_u or {}
    for robot in game.robots:
        ui = np.array(init_u.get(robot.id, np.zeros((T, robot.mu))), dtype=float)
        if ui.shape != (T, robot.mu):
            raise ShapeError(
                "initial inputs of robot {} have shape {}, expected {}".format(
                    robot.id, ui.shape, (T, robot.mu)
                )
            )
        u[robot.id] = ui
    gamma = {robot.id: cfg.gamma_for(robot.id) for robot in game.robots}

    solution = NashSolution({}, {})
    iteration = 0
    while True:
        x = fabric.map(lambda i: rollout(game.robot(i), u[i], T))
        inbound = fabric.broadcast(x)

        def local_pass(i):
            robot = game.robot(i)
            lam = backward_costates(robot, x[i], u[i], inbound[i])
            return lam, input_gradients(robot, x[i], u[i], inbound[i], lam)

        passes = fabric.map(local_pass)
        residuals = {i: float(np.max(np.abs(g))) if g.size else 0.0 for i, (_, g) in passes.items()}
        residual = max(residuals.values())
        solution.residual_history.append(residual)
        solution.robot_residual_history.append(residuals)

        if not np.isfinite(residual):
            raise DivergenceError("input residual became non-finite", step=iteration)
        if iteration % cfg.log_every == 0:
            logger.debug("shooting round %d: max |du| = %.3e", iteration, residual)
        if residual <= cfg.eps_u:
            solution.converged = True
            break
        if iteration >= cfg.max_iters:
            break

        def update(i):
            step = gamma[i]
            if cfg.backtracking:
                # a shrunk step grows back toward the configured one
                step = min(cfg.gamma_for(i), step / cfg.shrink)
            return _local_step(game.robot(i), u[i], passes[i][1], step, inbound[i], cfg)

        for i, (ui, gi) in fabric.map(update).items():
            u[i], gamma[i] = ui, gi
        iteration += 1

    solution.iterations = iteration
    solution.trajectories = {i: Trajectory(x[i], u[i]) for i in game.ids}
    solution.costates = {i: passes[i][0] for i in game.ids}
    if solution.converged:
        logger.info(
            "Nash shooting converged in %d rounds (residual %.3e)", iteration, residual
        )
    else:
        logger.warning(
            "Nash shooting stopped after %d rounds without converging (residual %.3e)",
            iteration,
            residual,
        )
    return solution


def pmp_residual(game, solution):
    """Per-robot max over t of the stationarity residual, with states re-rolled from the inputs."""
    x = {r.id: rollout(r, solution.trajectories[r.id].u, game.T) for r in game.robots}
    residual = {}
    for robot in game.robots:
        neighbor_x = {j: x[j] for j in robot.neighbors}
        u = solution.trajectories[robot.id].u
        lam = backward_costates(robot, x[robot.id], u, neighbor_x)
        grads = input_gradients(robot, x[robot.id], u, neighbor_x, lam)
        residual[robot.id] = float(np.max(np.abs(grads))) if grads.size else 0.0
    return residual


def input_hessian(robot, t, x, u, neighbor_x, lambda_next):
    cost = robot.running(t, x, u, neighbor_x, order=2)
    curv = robot.dynamics.curvature(x, u, robot.theta_dyn, np.asarray(lambda_next, dtype=float))
    return cost.huu + curv.uu


def check_input_hessian(game, solution, tol=0.0):
    """Flag, for every robot and step, whether ``d2H/du2`` is positive definite."""
    flags = {}
    for robot in game.robots:
        xi = solution.trajectories[robot.id]
        lam = solution.costates[robot.id]
        neighbor_x = solution.neighbor_states(robot)
        flags[robot.id] = {}
        for t in range(game.T):
            hess = input_hessian(
                robot, t, xi.x[t], xi.u[t], neighbor_states_at(neighbor_x, t), lam.next_of(t)
            )
            hess = 0.5 * (hess + hess.T)
            flags[robot.id][t] = bool(np.linalg.eigvalsh(hess)[0] > tol)
        bad = [t for t, ok in flags[robot.id].items() if not ok]
        if bad:
            logger.warning(
                "robot %s: input Hessian not positive definite at t=%s", robot.id, bad
            )
    return flags
