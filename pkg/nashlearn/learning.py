"""Learning per-robot parameters from Nash-equilibrium demonstrations.

Each outer iteration solves the forward game, differentiates the equilibrium
with the distributed sensitivity solver and moves every robot's θ_i along its
own loss gradient, all robots stepping from the same Θ^k.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from nashlearn.components.problem import Trajectory
from nashlearn.errors import (
    ConfigurationError,
    LearningAborted,
    LearningDiverged,
    ShapeError,
    StaleSensitivityError,
)
from nashlearn.export import write_checkpoint
from nashlearn.fabric import CommFabric
from nashlearn.forward import ShootingConfig, solve_nash
from nashlearn.linsolve import SolverConfig, extract_sensitivity, solve_distributed
from nashlearn.sensitivity import assemble_blocks, build_global_view, stack_time

logger = logging.getLogger(__name__)

LOSS_DIVERGENCE_FACTOR = 100.0


class DemonstrationSet:
    """Per-robot demonstrated trajectories, all over the game's horizon."""

    def __init__(self, demos, provenance="external"):
        self.demos = {int(i): list(seq) for i, seq in demos.items()}
        self.provenance = provenance
        for i, seq in self.demos.items():
            if not seq:
                raise ConfigurationError("robot {} has no demonstrations".format(i))
            for xi in seq:
                if not isinstance(xi, Trajectory):
                    raise ShapeError("demonstrations of robot {} must be trajectories".format(i))

    def __getitem__(self, i):
        return self.demos[i]

    def __len__(self):
        return len(self.demos)

    @property
    def count(self):
        return min(len(seq) for seq in self.demos.values())

    def check(self, game):
        for robot in game.robots:
            if robot.id not in self.demos:
                raise ConfigurationError("no demonstrations for robot {}".format(robot.id))
            for xi in self.demos[robot.id]:
                if xi.x.shape != (game.T + 1, robot.n) or xi.u.shape != (game.T, robot.mu):
                    raise ShapeError(
                        "demonstration of robot {} has shapes {} / {}".format(
                            robot.id, xi.x.shape, xi.u.shape
                        )
                    )
        return self

    @classmethod
    def from_solutions(cls, solutions, provenance="synthetic"):
        demos = {}
        for solution in solutions:
            for i, xi in solution.trajectories.items():
                demos.setdefault(i, []).append(xi)
        return cls(demos, provenance)


def _deviations(xi_star, demos):
    flat = xi_star.flat()
    out = []
    for demo in demos:
        other = demo.flat()
        if other.shape != flat.shape:
            raise ShapeError(
                "demonstration has {} coordinates, trajectory has {}".format(len(other), len(flat))
            )
        out.append(flat - other)
    return out


def loss(robot, xi_star, demos):
    """Sum over demonstrations of the squared distance between flattened trajectories."""
    return float(sum(d @ d for d in _deviations(xi_star, demos)))


def loss_gradient_wrt_traj(robot, xi_star, demos):
    """``2 sum_d (xi* - xi^d)`` in ``Trajectory.flat`` order."""
    deviations = _deviations(xi_star, demos)
    return 2.0 * np.sum(deviations, axis=0)


def parameter_gradient(robot, xi_star, demos, sensitivity, game_theta=None):
    """``dL_i/dθ_i``. A given ``game_theta`` must match the sensitivity's Θ stamp."""
    if sensitivity.robot != robot.id or not np.array_equal(sensitivity.theta, robot.theta):
        raise StaleSensitivityError(
            "sensitivity of robot {} was computed at θ={}, robot is at θ={}".format(
                sensitivity.robot, sensitivity.theta, robot.theta
            )
        )
    stamp = sensitivity.game_theta
    if game_theta is not None and stamp is not None:
        game_theta = np.asarray(game_theta, dtype=float)
        if stamp.shape != game_theta.shape or not np.array_equal(stamp, game_theta):
            raise StaleSensitivityError(
                "sensitivity of robot {} was computed at another Θ of the game".format(robot.id)
            )
    return loss_gradient_wrt_traj(robot, xi_star, demos) @ sensitivity.jacobian()


@dataclass
class LearningConfig:
    eta: float = 0.004
    decay: float = 1.0
    max_outer_iters: int = 500
    loss_tol: float = 0.0
    warm_start: bool = True
    theta_floor: Optional[float] = None
    checkpoint_every: int = 0
    robot_eta: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigurationError("eta must be positive, got {}".format(self.eta))
        if self.loss_tol < 0:
            raise ConfigurationError("loss_tol must be non-negative")
        if not 0 < self.decay <= 1:
            raise ConfigurationError("decay must lie in (0, 1], got {}".format(self.decay))
        for i, eta in self.robot_eta.items():
            if eta <= 0:
                raise ConfigurationError("eta of robot {} must be positive".format(i))

    def eta_at(self, k, i=None):
        return self.robot_eta.get(i, self.eta) * self.decay**k


class LearningTrace:
    def __init__(self, theta_star=None):
        self.theta_star = theta_star
        self.records = []
        self.converged = False
        self.final_theta = None

    def __len__(self):
        return len(self.records)

    def append(self, k, losses, theta, nash_iters=0, solver_iters=0):
        losses = {i: float(v) for i, v in losses.items()}
        theta = {i: np.array(v) for i, v in theta.items()}
        record = {
            "k": k,
            "losses": losses,
            "total_loss": sum(losses.values()),
            "theta": theta,
            "nash_iterations": nash_iters,
            "solver_iterations": solver_iters,
        }
        if self.theta_star is not None:
            errors = {
                i: float(np.linalg.norm(theta[i] - np.asarray(self.theta_star[i])))
                for i in theta
            }
            record["param_errors"] = errors
            record["param_error"] = float(np.sqrt(sum(e**2 for e in errors.values())))
        self.records.append(record)
        self.final_theta = theta
        return record

    @property
    def total_losses(self):
        return [r["total_loss"] for r in self.records]

    @property
    def param_errors(self):
        return [r.get("param_error") for r in self.records]

    def to_table(self):
        rows = []
        for r in self.records:
            row = {"k": r["k"], "total_loss": r["total_loss"]}
            for i, v in sorted(r["losses"].items()):
                row["loss_{}".format(i)] = v
            for i, v in sorted(r.get("param_errors", {}).items()):
                row["param_error_{}".format(i)] = v
            rows.append(row)
        return rows

    def to_json(self):
        last = self.records[-1] if self.records else {}
        return {
            "iterations": len(self.records),
            "converged": self.converged,
            "total_loss": last.get("total_loss"),
            "param_error": last.get("param_error"),
            "theta": {str(i): v.tolist() for i, v in (self.final_theta or {}).items()},
        }


def gradients_at(game, solution, demos, solver_cfg, fabric, init=None):
    """Per-robot ``dL_i/dθ_i`` at the forward ``solution`` plus the raw linear solve."""
    T = game.T
    blocks = assemble_blocks(game, solution, fabric)
    stacked = fabric.map(lambda i: stack_time(blocks[i], T))
    views = build_global_view(stacked, fabric, orthonormal=solver_cfg.orthonormal_rows)
    linear = solve_distributed(views, fabric, solver_cfg, init=init)
    slices = game.theta_slices
    theta = game.theta

    def local_gradient(i):
        robot = game.robot(i)
        sensitivity = extract_sensitivity(linear.Y[i], robot, T, slices[i], theta)
        return parameter_gradient(
            robot, solution.trajectories[i], demos[i], sensitivity, game_theta=theta
        )

    return fabric.map(local_gradient), linear


def learn(
    game,
    demos,
    shooting_cfg=None,
    solver_cfg=None,
    learn_cfg=None,
    fabric=None,
    theta_star=None,
    checkpoint=None,
    start_iteration=0,
):
    """Run the outer learning loop and return its ``LearningTrace``.

    ``checkpoint`` is a path rewritten every ``checkpoint_every`` iterations;
    ``start_iteration`` continues the learning-rate schedule after a resume.
    """
    shooting_cfg = shooting_cfg or ShootingConfig()
    solver_cfg = solver_cfg or SolverConfig()
    learn_cfg = learn_cfg or LearningConfig()
    fabric = fabric or CommFabric(game.graph)
    demos.check(game)

    trace = LearningTrace(theta_star)
    initial = None
    init_u, init_linear = None, None
    k = start_iteration
    while True:
        solution = solve_nash(game, init_u, shooting_cfg, fabric)
        if not solution.converged:
            raise LearningAborted(
                "forward solve did not converge at outer iteration {} (residual {:.3e})".format(
                    k, solution.final_residual
                ),
                trace,
            )
        losses = fabric.map(
            lambda i: loss(game.robot(i), solution.trajectories[i], demos[i])
        )
        record = trace.append(
            k,
            losses,
            {robot.id: robot.theta for robot in game.robots},
            nash_iters=solution.iterations,
        )
        total = record["total_loss"]
        logger.info("outer iteration %d: total loss %.6g", k, total)
        if initial is None:
            initial = total
        elif initial > 0 and total > LOSS_DIVERGENCE_FACTOR * initial:
            raise LearningDiverged(
                "loss grew from {:.3e} to {:.3e}; try a smaller eta than {}".format(
                    initial, total, learn_cfg.eta
                ),
                trace,
            )
        if total <= learn_cfg.loss_tol:
            trace.converged = True
            break
        if k - start_iteration >= learn_cfg.max_outer_iters:
            break

        grads, linear = gradients_at(game, solution, demos, solver_cfg, fabric, init_linear)
        record["solver_iterations"] = linear.iterations
        if not linear.converged:
            message = "sensitivity solve did not converge at outer iteration {} (residual {:.3e})"
            raise LearningAborted(message.format(k, linear.final_residual), trace)

        def step(i):
            theta = game.robot(i).theta - learn_cfg.eta_at(k, i) * grads[i]
            if learn_cfg.theta_floor is not None:
                theta = np.maximum(theta, learn_cfg.theta_floor)
            return theta

        game = game.with_theta(fabric.map(step))
        if learn_cfg.warm_start:
            init_u = solution.inputs()
            init_linear = {i: (linear.Y[i], linear.Z[i]) for i in linear.Y}
        k += 1
        if checkpoint and learn_cfg.checkpoint_every and k % learn_cfg.checkpoint_every == 0:
            write_checkpoint(checkpoint, k, {r.id: r.theta for r in game.robots}, trace)

    if checkpoint:
        write_checkpoint(checkpoint, k, {r.id: r.theta for r in game.robots}, trace)
    return trace
