"""Centralised reference solvers.

Nothing here is distributed. These routines build and solve the full
problems densely so the distributed solvers can be checked against them.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from scipy import linalg, optimize

from nashlearn.components.problem import Trajectory, eval_objective, neighbor_states_at, rollout
from nashlearn.errors import (
    ConfigurationError,
    DegenerateGameError,
    DivergenceError,
    OracleFailure,
    UnsolvableSystemError,
)
from nashlearn.fabric import CommFabric
from nashlearn.forward import (
    CostateTrajectory,
    NashSolution,
    ShootingConfig,
    backward_costates,
    input_gradients,
    solve_nash,
)
from nashlearn.linsolve import extract_sensitivity
from nashlearn.sensitivity import YLayout, assemble_blocks, row_offsets, stack_time

logger = logging.getLogger(__name__)

SOLVE_TOLERANCE = 1e-10


def numerical_jacobian(fn, x, eps=1e-6):
    """Central-difference Jacobian of ``fn`` at ``x``; scalar outputs give a row."""
    x = np.asarray(x, dtype=float)
    base = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.zeros((base.size, x.size))
    for k in range(x.size):
        step = np.zeros_like(x)
        step.flat[k] = eps
        plus = np.atleast_1d(np.asarray(fn(x + step), dtype=float))
        minus = np.atleast_1d(np.asarray(fn(x - step), dtype=float))
        jac[:, k] = (plus - minus).ravel() / (2 * eps)
    return jac


def numerical_gradient(fn, x, eps=1e-6):
    return numerical_jacobian(fn, x, eps)[0]


def numerical_hessian(fn, x, eps=1e-4):
    """Central-difference Hessian of a scalar ``fn``."""
    x = np.asarray(x, dtype=float)
    size = x.size
    hess = np.zeros((size, size))
    for a in range(size):
        ea = np.zeros(size)
        ea[a] = eps
        for b in range(a, size):
            eb = np.zeros(size)
            eb[b] = eps
            value = (
                fn(x + ea + eb) - fn(x + ea - eb) - fn(x - ea + eb) + fn(x - ea - eb)
            ) / (4 * eps * eps)
            hess[a, b] = hess[b, a] = value
    return hess


def relative_error(estimate, reference, floor=1e-8):
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = max(np.max(np.abs(reference)) if reference.size else 0.0, floor)
    return float(np.max(np.abs(estimate - reference)) / scale) if reference.size else 0.0


@dataclass
class DenseSystem:
    """Global system ``A Y = b`` with ``b = -C_bar``."""

    A: np.ndarray
    b: np.ndarray
    columns: Dict[int, slice]
    solution: np.ndarray = None
    residual: float = float("nan")
    least_squares: bool = False

    def block(self, i):
        return self.solution[self.columns[i]]


def global_matrix(stacked):
    """Assemble ``[A_{l,i}]`` and ``-C_bar`` centrally from every robot's stacked system."""
    rows = row_offsets({i: s.rows for i, s in stacked.items()})
    columns = row_offsets({i: s.layout.size for i, s in stacked.items()})
    total_rows = sum(s.rows for s in stacked.values())
    total_cols = sum(s.layout.size for s in stacked.values())
    r = next(iter(stacked.values())).r
    A = np.zeros((total_rows, total_cols))
    b = np.zeros((total_rows, r))
    for ell, system in stacked.items():
        A[rows[ell], columns[ell]] = system.A_ii
        for j, block in system.A_ij.items():
            A[rows[ell], columns[j]] = block
        b[rows[ell]] = -system.C_bar
    return A, b, columns


def dense_system(game, solution):
    blocks = assemble_blocks(game, solution)
    stacked = {i: stack_time(blocks[i], game.T) for i in game.ids}
    A, b, columns = global_matrix(stacked)
    system = DenseSystem(A, b, columns)
    try:
        Y = linalg.solve(A, b)
    except (linalg.LinAlgError, ValueError):
        Y, *_ = linalg.lstsq(A, b)
        system.least_squares = True
    scale = max(1.0, float(np.max(np.abs(b))))
    system.residual = float(np.max(np.abs(A @ Y - b)))
    if not system.least_squares and system.residual > SOLVE_TOLERANCE * scale * 1e3:
        Y, *_ = linalg.lstsq(A, b)
        system.least_squares = True
        system.residual = float(np.max(np.abs(A @ Y - b)))
    if system.least_squares:
        logger.warning(
            "global sensitivity system is singular; least-squares residual %.3e", system.residual
        )
        if system.residual > 1e-6 * scale:
            raise UnsolvableSystemError(
                "sensitivity system has no solution (residual {:.3e})".format(system.residual)
            )
    system.solution = Y
    return system


def dense_sensitivity_solve(game, solution):
    """Solve the differentiated conditions centrally; returns ``(sensitivities, system)``."""
    system = dense_system(game, solution)
    slices = game.theta_slices
    sensitivities = {
        i: extract_sensitivity(system.block(i), game.robot(i), game.T, slices[i]) for i in game.ids
    }
    return sensitivities, system


def full_costates(robot, xi, lam, neighbor_x):
    """``lambda^0..lambda^T``, extending the recursion one step to ``t = 0``."""
    cost = robot.running(0, xi.x[0], xi.u[0], neighbor_states_at(neighbor_x, 0), order=1)
    fx = robot.dynamics.jacobians(xi.x[0], xi.u[0], robot.theta_dyn).fx
    lam0 = cost.gx + fx.T @ lam.next_of(0)
    return np.vstack([lam0, lam.values])


def _y_vector(game, solution, i):
    robot = game.robot(i)
    xi = solution.trajectories[i]
    lam = full_costates(robot, xi, solution.costates[i], solution.neighbor_states(robot))
    return np.concatenate([xi.x.ravel(), xi.u.ravel(), lam.ravel()])


def _tight_solve(game, cfg, init_u):
    result = solve_nash(game, init_u, cfg, CommFabric(game.graph))
    if not result.converged:
        raise OracleFailure(
            "forward solve did not converge (residual {:.3e})".format(result.final_residual)
        )
    return result


def fd_sensitivity(game, theta_index, delta=None, cfg=None, init_u=None):
    """Central difference of every robot's ``(x, u, lambda)`` in one coordinate of Θ.

    Returns a map robot id -> vector in the ``Y_i`` row layout.
    """
    theta = game.theta
    if delta is None:
        delta = 1e-5 * (1 + abs(theta[theta_index]))
    if delta <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    cfg = (cfg or ShootingConfig()).tightened()
    columns = {}
    plus, minus = theta.copy(), theta.copy()
    plus[theta_index] += delta
    minus[theta_index] -= delta
    up_game, down_game = game.with_theta(plus), game.with_theta(minus)
    try:
        up = _tight_solve(up_game, cfg, init_u)
        down = _tight_solve(down_game, cfg, init_u)
    except DivergenceError as e:
        raise OracleFailure("forward solve diverged: {}".format(e))
    # lambda^0 depends on theta directly, so each side uses its own parameters
    for i in game.ids:
        columns[i] = (
            _y_vector(up_game, up, i) - _y_vector(down_game, down, i)
        ) / (2 * delta)
    return columns


def fd_sensitivity_matrix(game, delta=None, cfg=None, init_u=None):
    """All Θ columns; map robot id -> ``(Y_i rows, r)`` matrix."""
    columns = [fd_sensitivity(game, k, delta, cfg, init_u) for k in range(game.r)]
    return {i: np.column_stack([c[i] for c in columns]) for i in game.ids}


def fd_trajectory_jacobian(game, i, delta=None, cfg=None, init_u=None):
    """``d xi_i / d theta_i`` by central differences, rows in ``Trajectory.flat`` order."""
    layout = YLayout(game.robot(i).n, game.robot(i).mu, game.T)
    s = game.theta_slices[i]
    columns = [fd_sensitivity(game, k, delta, cfg, init_u)[i] for k in range(s.start, s.stop)]
    return np.column_stack(columns)[layout.trajectory]


@dataclass
class BestResponse:
    robot: int
    before: float
    after: float
    conclusive: bool
    inputs: np.ndarray = field(repr=False, default=None)

    @property
    def improvement(self):
        return self.before - self.after

    @property
    def relative(self):
        return self.improvement / max(abs(self.before), 1e-12)


def best_response_check(game, solution, i, tol=1e-12, max_iters=5000):
    """Re-optimise robot ``i`` alone with neighbour trajectories frozen."""
    robot = game.robot(i)
    T = game.T
    neighbor_x = solution.neighbor_states(robot)
    u0 = np.array(solution.trajectories[i].u)

    def objective(flat):
        u = flat.reshape(T, robot.mu)
        try:
            x = rollout(robot, u, T)
        except DivergenceError:
            return np.inf, np.zeros_like(flat)
        value = eval_objective(robot, Trajectory(x, u), neighbor_x)
        lam = backward_costates(robot, x, u, neighbor_x)
        return value, input_gradients(robot, x, u, neighbor_x, lam).ravel()

    before = objective(u0.ravel())[0]
    try:
        result = optimize.minimize(
            objective,
            u0.ravel(),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iters, "ftol": tol, "gtol": tol * 1e2},
        )
    except (DivergenceError, ValueError) as e:
        logger.warning("best-response re-solve of robot %s failed: %s", i, e)
        return BestResponse(i, before, before, False)
    after = min(float(result.fun), before)
    conclusive = bool(result.success) or float(np.max(np.abs(result.jac))) < 1e-6
    return BestResponse(i, before, after, conclusive, result.x.reshape(T, robot.mu))


def _linearised_cost(robot, t, terminal, neighbor_dims):
    zero_x = np.zeros(robot.n)
    zero_n = {j: np.zeros(n) for j, n in neighbor_dims.items()}
    if terminal:
        return robot.terminal(t, zero_x, zero_n, order=2)
    return robot.running(t, zero_x, np.zeros(robot.mu), zero_n, order=2)


def dense_nash_lq(game):
    """Exact Nash solution of an LQ game from one dense linear solve."""
    if not game.is_lq():
        raise ConfigurationError("dense Nash oracle needs linear dynamics and quadratic costs")
    T = game.T
    # unknowns per robot: x^0..x^T, u^0..u^{T-1}, lambda^1..lambda^T
    sizes = {r.id: r.n * (T + 1) + r.mu * T + r.n * T for r in game.robots}
    cols = row_offsets(sizes)
    total = sum(sizes.values())

    def x_col(j, t):
        rob = game.robot(j)
        start = cols[j].start + t * rob.n
        return slice(start, start + rob.n)

    def u_col(j, t):
        rob = game.robot(j)
        start = cols[j].start + rob.n * (T + 1) + t * rob.mu
        return slice(start, start + rob.mu)

    def lam_col(j, t):
        rob = game.robot(j)
        start = cols[j].start + rob.n * (T + 1) + rob.mu * T + (t - 1) * rob.n
        return slice(start, start + rob.n)

    A = np.zeros((total, total))
    b = np.zeros(total)
    row = 0

    def rows(size):
        nonlocal row
        rs = slice(row, row + size)
        row += size
        return rs

    for robot in game.robots:
        i, n, mu = robot.id, robot.n, robot.mu
        dims = {j: game.robot(j).n for j in robot.neighbors}
        zero_x, zero_u = np.zeros(n), np.zeros(mu)
        jac = robot.dynamics.jacobians(zero_x, zero_u, robot.theta_dyn)
        offset = robot.step(zero_x, zero_u)

        rs = rows(n)
        A[rs, x_col(i, 0)] = np.eye(n)
        b[rs] = robot.x0
        for t in range(T):
            rs = rows(n)
            A[rs, x_col(i, t + 1)] = np.eye(n)
            A[rs, x_col(i, t)] = -jac.fx
            A[rs, u_col(i, t)] = -jac.fu
            b[rs] = offset
        for t in range(T):
            cost = _linearised_cost(robot, t, False, dims)
            rs = rows(mu)
            A[rs, x_col(i, t)] = cost.hxu.T
            A[rs, u_col(i, t)] = cost.huu
            for j in robot.neighbors:
                A[rs, x_col(j, t)] = cost.hun[j]
            A[rs, lam_col(i, t + 1)] = jac.fu.T
            b[rs] = -cost.gu
        for t in range(1, T):
            cost = _linearised_cost(robot, t, False, dims)
            rs = rows(n)
            A[rs, lam_col(i, t)] = np.eye(n)
            A[rs, x_col(i, t)] = -cost.hxx
            A[rs, u_col(i, t)] = -cost.hxu
            for j in robot.neighbors:
                A[rs, x_col(j, t)] = -cost.hxn[j]
            A[rs, lam_col(i, t + 1)] = -jac.fx.T
            b[rs] = cost.gx
        cost = _linearised_cost(robot, T, True, dims)
        rs = rows(n)
        A[rs, lam_col(i, T)] = np.eye(n)
        A[rs, x_col(i, T)] = -cost.hxx
        for j in robot.neighbors:
            A[rs, x_col(j, T)] = -cost.hxn[j]
        b[rs] = cost.gx

    try:
        z = linalg.solve(A, b)
    except (linalg.LinAlgError, ValueError) as e:
        raise DegenerateGameError("stacked optimality system is singular: {}".format(e))
    if not np.all(np.isfinite(z)) or np.max(np.abs(A @ z - b)) > 1e-8 * max(1.0, np.max(np.abs(b))):
        raise DegenerateGameError("stacked optimality system is numerically singular")

    trajectories, costates = {}, {}
    for robot in game.robots:
        i = robot.id
        x = np.vstack([z[x_col(i, t)] for t in range(T + 1)])
        u = np.vstack([z[u_col(i, t)] for t in range(T)]).reshape(T, robot.mu)
        lam = np.vstack([z[lam_col(i, t)] for t in range(1, T + 1)])
        trajectories[i] = Trajectory(x, u)
        costates[i] = CostateTrajectory(lam)
    return NashSolution(trajectories, costates, [0.0], iterations=0, converged=True)
