"""Distributed iterative solver for ``sum_i (Psi_i Y_i + Chat_i) = 0``.

Every robot keeps its own unknown block ``Y_i`` and an auxiliary matrix
``Z_i`` living in the row space of the global system. Per round the robots
swap ``Z`` with their neighbours and take the steps

    v_i = Psi_i Y_i + Chat_i - sum_{l in N_i} (Z_i - Z_l)
    Y_i <- Y_i - alpha Psi_i' v_i
    Z_i <- Z_i + alpha v_i

On an undirected graph the ``Z`` differences telescope, so ``sum_i v_i`` is
always the residual of the global equation.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from nashlearn.errors import ConfigurationError, ShapeError, StepSizeError, TopologyError
from nashlearn.sensitivity import YLayout

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


@dataclass
class SolverConfig:
    alpha: Optional[float] = None
    eps_v: float = 1e-9
    max_iters: int = 200000
    seed: Optional[int] = None
    init_scale: float = 1.0
    log_every: int = 5000
    orthonormal_rows: bool = True

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigurationError("alpha must be positive, got {}".format(self.alpha))
        if self.eps_v <= 0:
            raise ConfigurationError("eps_v must be positive, got {}".format(self.eps_v))
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")


@dataclass
class SolverState:
    Y: Dict[int, np.ndarray]
    Z: Dict[int, np.ndarray]
    alpha: float
    eps_v: float
    tau: int = 0
    v: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class DistributedSolution:
    Y: Dict[int, np.ndarray]
    Z: Dict[int, np.ndarray]
    alpha: float
    residual_history: List[float] = field(default_factory=list)
    robot_residual_history: List[Dict[int, float]] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def final_residual(self):
        return self.residual_history[-1] if self.residual_history else float("nan")

    def to_json(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.final_residual,
            "alpha": self.alpha,
        }


def local_residual(Psi_i, Chat_i, Y_i, Z_i, neighbor_Z, neighbors=None):
    if neighbors is not None and set(neighbor_Z) != set(neighbors):
        raise TopologyError(
            "auxiliary states needed from {}, got {}".format(sorted(neighbors), sorted(neighbor_Z))
        )
    v = Psi_i @ Y_i + Chat_i
    for Z_l in neighbor_Z.values():
        v = v - (Z_i - Z_l)
    return v


def default_alpha(views, fabric):
    """``0.9 / (max_i ||Psi_i||_2^2 + 2 max_degree)`` with both maxima found by max-consensus."""
    norms = fabric.map(lambda i: float(np.linalg.norm(views[i].Psi, 2) ** 2), sorted(views))
    degrees = {i: float(fabric.graph.degree(i)) for i in views}
    norm = max(fabric.max_consensus(norms).values())
    degree = max(fabric.max_consensus(degrees).values())
    bound = norm + 2.0 * degree
    if bound <= 0:
        return 1.0
    return 0.9 / bound


def _initial_state(views, cfg, init):
    rng = np.random.default_rng(cfg.seed) if cfg.seed is not None else None
    Y, Z = {}, {}
    for i, view in views.items():
        shape_y = (view.Psi.shape[1], view.Chat.shape[1])
        shape_z = view.Chat.shape
        if init and i in init:
            Y[i] = np.array(init[i][0], dtype=float)
            Z[i] = np.array(init[i][1], dtype=float)
            if Y[i].shape != shape_y or Z[i].shape != shape_z:
                raise ShapeError("warm start for robot {} has the wrong shape".format(i))
        elif rng is not None:
            Y[i] = cfg.init_scale * rng.standard_normal(shape_y)
            Z[i] = cfg.init_scale * rng.standard_normal(shape_z)
        else:
            Y[i] = np.zeros(shape_y)
            Z[i] = np.zeros(shape_z)
    return Y, Z


def solve_distributed(views, fabric, cfg=None, init=None, callback=None):
    """Iterate the primal and auxiliary updates until ``max_i max|v_i| <= eps_v``.

    ``init`` maps robot ids to ``(Y_i, Z_i)`` warm starts. ``callback`` is called
    as ``callback(state)`` every round after the residuals are formed.
    """
    cfg = cfg or SolverConfig()
    alpha = cfg.alpha if cfg.alpha is not None else default_alpha(views, fabric)
    Y, Z = _initial_state(views, cfg, init)
    state = SolverState(Y, Z, alpha, cfg.eps_v)
    result = DistributedSolution(Y, Z, alpha)
    initial = None

    while True:
        inbound = fabric.broadcast(Z)

        def residual(i):
            view = views[i]
            return local_residual(
                view.Psi, view.Chat, Y[i], Z[i], inbound[i], fabric.graph.neighbors(i)
            )

        state.v = fabric.map(residual, sorted(views))
        per_robot = {i: float(np.max(np.abs(v))) if v.size else 0.0 for i, v in state.v.items()}
        worst = max(per_robot.values())
        result.residual_history.append(worst)
        result.robot_residual_history.append(per_robot)
        if callback is not None:
            callback(state)

        if initial is None:
            initial = worst
        if not np.isfinite(worst) or (initial > 0 and worst > DIVERGENCE_FACTOR * initial):
            raise StepSizeError(
                "distributed solve diverged at round {} (residual {:.3e}); "
                "try a smaller alpha than {:.3e}".format(state.tau, worst, alpha),
                step=state.tau,
            )
        if state.tau % cfg.log_every == 0:
            logger.debug("linear solve round %d: max |v| = %.3e", state.tau, worst)
        if worst <= cfg.eps_v:
            result.converged = True
            break
        if state.tau >= cfg.max_iters:
            break

        def update(i):
            v = state.v[i]
            return Y[i] - alpha * views[i].Psi.T @ v, Z[i] + alpha * v

        for i, (y, z) in fabric.map(update, sorted(views)).items():
            Y[i], Z[i] = y, z
        state.tau += 1

    result.iterations = state.tau
    if result.converged:
        logger.info(
            "distributed linear solve converged in %d rounds (alpha %.3e)", state.tau, alpha
        )
    else:
        logger.warning(
            "distributed linear solve stopped after %d rounds, residual %.3e",
            state.tau,
            result.final_residual,
        )
    return result


@dataclass(frozen=True, eq=False)
class Sensitivity:
    """``dx_i/dtheta_i`` and ``du_i/dtheta_i`` tagged with the θ_i they were computed at.

    ``game_theta`` optionally stamps the whole Θ of the game.
    """

    robot: int
    dx: np.ndarray
    du: np.ndarray
    theta: np.ndarray
    game_theta: Optional[np.ndarray] = None

    @property
    def r(self):
        return self.dx.shape[2]

    def jacobian(self):
        """Rows ordered like ``Trajectory.flat``: ``x^0..x^T`` then ``u^0..u^{T-1}``."""
        return np.vstack([self.dx.reshape(-1, self.r), self.du.reshape(-1, self.r)])


def extract_sensitivity(Y_i, robot, T, columns, game_theta=None):
    """Unstack ``X`` and ``U`` from ``Y_i`` and keep the θ_i ``columns``."""
    layout = YLayout(robot.n, robot.mu, T)
    Y_i = np.asarray(Y_i, dtype=float)
    if Y_i.ndim != 2 or Y_i.shape[0] != layout.size:
        raise ShapeError(
            "robot {} sensitivity has shape {}, expected {} rows".format(
                robot.id, Y_i.shape, layout.size
            )
        )
    block = Y_i[:, columns]
    if block.shape[1] != robot.r:
        raise ShapeError(
            "robot {} has {} parameters but {} columns were selected".format(
                robot.id, robot.r, block.shape[1]
            )
        )
    dx = block[: layout.u_start].reshape(T + 1, robot.n, robot.r)
    du = block[layout.u_start : layout.lam_start].reshape(T, robot.mu, robot.r)
    stamp = None if game_theta is None else np.array(game_theta, dtype=float)
    return Sensitivity(robot.id, dx.copy(), du.copy(), np.array(robot.theta), stamp)
