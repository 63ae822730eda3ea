import glob
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np

from nashlearn.components.problem import Trajectory, rollout
from nashlearn.errors import (
    ConfigurationError,
    DegenerateGameError,
    LearningAborted,
    ShapeError,
)
from nashlearn.export import (
    read_checkpoint,
    read_trajectory,
    residual_table,
    write_table,
    write_trajectory,
)
from nashlearn.fabric import CommFabric
from nashlearn.forward import (
    NashSolution,
    backward_costates,
    check_input_hessian,
    pmp_residual,
    solve_nash,
)
from nashlearn.learning import DemonstrationSet, learn
from nashlearn.oracles import best_response_check, dense_nash_lq

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3
EXIT_LOCALITY = 4

RANDOM_INIT_SPREAD = 0.3


@dataclass
class RunReport:
    scenario: str
    mode: str
    files: List[str] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    audit: Dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    solution: object = field(default=None, repr=False)
    trace: object = field(default=None, repr=False)

    def add_file(self, path):
        self.files.append(path)
        return path

    def to_json(self):
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "files": self.files,
            "summary": self.summary,
            "audit": self.audit,
            "exit_code": self.exit_code,
        }


def configs(scenario, gamma=None, tol=None, max_iters=None, alpha=None, eta=None, mode="forward"):
    """Scenario configs with command-line overrides applied."""
    shooting, solver, learning = scenario.shooting, scenario.solver, scenario.learning
    if gamma is not None:
        shooting = replace(shooting, gamma=gamma)
    if alpha is not None:
        solver = replace(solver, alpha=alpha)
    if eta is not None:
        learning = replace(learning, eta=eta)
    if mode == "inverse":
        if tol is not None:
            learning = replace(learning, loss_tol=tol)
        if max_iters is not None:
            learning = replace(learning, max_outer_iters=max_iters)
    else:
        if tol is not None:
            shooting = replace(shooting, eps_u=tol)
        if max_iters is not None:
            shooting = replace(shooting, max_iters=max_iters)
    return shooting, solver, learning


def load_theta(game, theta):
    """Accept a checkpoint path, a map of robot id -> θ_i or ``None``."""
    if theta is None:
        return game
    if isinstance(theta, str):
        _, theta = read_checkpoint(theta)
    return game.with_theta(theta)


def _out(out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _write_csv(report, path, rows):
    with open(path, "w", encoding="utf8", newline="") as f:
        write_table(f, rows)
    return report.add_file(path)


def write_solution(report, out_dir, solution, prefix="robot", **meta):
    for i, xi in sorted(solution.trajectories.items()):
        path = _out(out_dir, "{}_{}.csv".format(prefix, i))
        with open(path, "w", encoding="utf8", newline="") as f:
            write_trajectory(f, xi, solution.costates.get(i), robot=i, **meta)
        report.add_file(path)


def obstacle_clearance(scenario, solution):
    """Smallest distance from any robot position to any obstacle boundary."""
    clearance = {}
    for i, xi in solution.trajectories.items():
        dim = scenario.game.robot(i).dynamics.position_dim
        gaps = [
            float(np.min(np.linalg.norm(xi.x[:, :dim] - disk.center[:dim], axis=1)) - disk.radius)
            for disk in scenario.obstacles
        ]
        clearance[i] = min(gaps) if gaps else float("inf")
    return clearance


def cmd_forward(scenario, out_dir, theta=None, strict=True, workers=1, **overrides):
    report = RunReport(scenario.name, "forward")
    shooting, _, _ = configs(scenario, **overrides)
    game = load_theta(scenario.game, theta)
    fabric = CommFabric(game.graph, strict=strict, workers=workers)
    solution = solve_nash(game, None, shooting, fabric)

    write_solution(report, out_dir, solution, scenario=scenario.name)
    _write_csv(
        report,
        _out(out_dir, "residuals.csv"),
        residual_table(solution.residual_history, solution.robot_residual_history),
    )
    flags = check_input_hessian(game, solution)
    _write_csv(
        report,
        _out(out_dir, "hessian.csv"),
        [
            {"robot": i, "t": t, "positive_definite": ok}
            for i, per_t in sorted(flags.items())
            for t, ok in sorted(per_t.items())
        ],
    )
    _write_csv(report, _out(out_dir, "audit.csv"), fabric.audit.to_table())

    report.summary = {
        **solution.to_json(),
        "hessian_pd": all(all(v.values()) for v in flags.values()),
        "clearance": obstacle_clearance(scenario, solution),
    }
    report.audit = fabric.audit.to_json()
    report.exit_code = EXIT_OK if solution.converged else EXIT_NOT_CONVERGED
    report.solution = solution
    return report


def cmd_make_demos(
    scenario, out_dir, count=None, seed=None, perturbation=None, strict=True, workers=1, **overrides
):
    """Synthesise demonstrations at the scenario's ground truth.

    Each demonstration is an independent forward solve started from seeded
    random inputs of scale ``perturbation``; ``noise`` in the scenario's
    ``<demos>`` element adds observation noise to the converged trajectory.
    Nothing is written unless every solve converges.
    """
    report = RunReport(scenario.name, "make-demos")
    settings = scenario.demos
    count = settings.count if count is None else count
    seed = settings.seed if seed is None else seed
    perturbation = settings.perturbation if perturbation is None else perturbation
    if count < 1:
        raise ConfigurationError("demonstration count must be at least 1")
    shooting, _, _ = configs(scenario, **overrides)
    game = scenario.true_game()
    fabric = CommFabric(game.graph, strict=strict, workers=workers)
    rng = np.random.default_rng(seed)

    demos = []
    for d in range(count):
        init_u = {
            r.id: perturbation * rng.standard_normal((game.T, r.mu)) for r in game.robots
        }
        solution = solve_nash(game, init_u, shooting, fabric)
        if not solution.converged:
            report.exit_code = EXIT_NOT_CONVERGED
            report.summary = {"failed_demo": d, **solution.to_json()}
            report.audit = fabric.audit.to_json()
            return report
        demos.append(solution)

    for d, solution in enumerate(demos):
        for i, xi in sorted(solution.trajectories.items()):
            if settings.noise > 0:
                x = np.array(xi.x)
                x[1:] += settings.noise * rng.standard_normal(x[1:].shape)
                xi = Trajectory(x, xi.u + settings.noise * rng.standard_normal(xi.u.shape))
            path = _out(out_dir, "demo_{}_robot_{}.csv".format(d, i))
            with open(path, "w", encoding="utf8", newline="") as f:
                write_trajectory(
                    f,
                    xi,
                    robot=i,
                    demo=d,
                    provenance="synthetic",
                    seed=seed,
                    scenario=scenario.name,
                )
            report.add_file(path)
    report.summary = {
        "count": count,
        "seed": seed,
        "iterations": [s.iterations for s in demos],
    }
    report.audit = fabric.audit.to_json()
    return report


def load_demos(paths, provenance="external"):
    demos = {}
    for path in paths:
        with open(path, encoding="utf8") as f:
            xi, meta, _ = read_trajectory(f)
        if "robot" not in meta:
            raise ConfigurationError("demonstration {} does not name its robot".format(path), 1)
        demos.setdefault(int(meta["robot"]), []).append(xi)
        provenance = meta.get("provenance", provenance)
    if not demos:
        raise ConfigurationError("no demonstration files found")
    return DemonstrationSet(demos, provenance)


def expand_paths(paths):
    found = []
    for path in paths:
        if os.path.isdir(path):
            found.extend(sorted(glob.glob(os.path.join(path, "demo_*_robot_*.csv"))))
        else:
            found.append(path)
    return found


def initial_game(scenario, init, seed=None):
    """``init`` is "scenario", "truth", "random", a scale factor applied to θ* or a checkpoint.

    "random" multiplies every entry of θ* by ``exp(RANDOM_INIT_SPREAD * N(0, 1))``
    drawn from ``seed``; the other modes take no seed.
    """
    if seed is not None and init != "random":
        raise ConfigurationError('a seed only applies to --init random, got "{}"'.format(init))
    if init in (None, "scenario"):
        return scenario.game, 0
    if init == "truth":
        return scenario.true_game(), 0
    if init == "random":
        truth = scenario.true_game()
        rng = np.random.default_rng(seed)
        factors = np.exp(RANDOM_INIT_SPREAD * rng.standard_normal(truth.theta.shape))
        return truth.with_theta(factors * truth.theta), 0
    if os.path.exists(init):
        start, theta = read_checkpoint(init)
        return scenario.game.with_theta(theta), start
    try:
        scale = float(init)
    except ValueError:
        raise ConfigurationError('unknown init mode "{}"'.format(init))
    truth = scenario.true_game()
    return truth.with_theta(scale * truth.theta), 0


def cmd_inverse(
    scenario,
    demo_paths,
    out_dir,
    init="scenario",
    seed=None,
    strict=True,
    workers=1,
    **overrides
):
    report = RunReport(scenario.name, "inverse")
    shooting, solver, learning = configs(scenario, mode="inverse", **overrides)
    demos = load_demos(expand_paths(demo_paths))
    game, start = initial_game(scenario, init, seed)
    fabric = CommFabric(game.graph, strict=strict, workers=workers)
    checkpoint = _out(out_dir, "theta.json")

    try:
        trace = learn(
            game,
            demos,
            shooting,
            solver,
            learning,
            fabric,
            theta_star=scenario.theta_star,
            checkpoint=checkpoint,
            start_iteration=start,
        )
    except LearningAborted as e:
        logger.error(str(e))
        if e.trace is not None:
            _write_csv(report, _out(out_dir, "trace.csv"), e.trace.to_table())
            report.summary = {"error": str(e), **e.trace.to_json()}
        report.exit_code = EXIT_NOT_CONVERGED
        report.audit = fabric.audit.to_json()
        return report

    report.add_file(checkpoint)
    _write_csv(report, _out(out_dir, "trace.csv"), trace.to_table())
    learned = game.with_theta(trace.final_theta)
    solution = solve_nash(learned, None, shooting, fabric)
    write_solution(report, out_dir, solution, prefix="learned_robot", scenario=scenario.name)
    report.summary = trace.to_json()
    report.audit = fabric.audit.to_json()
    report.exit_code = EXIT_OK if trace.converged else EXIT_NOT_CONVERGED
    report.trace = trace
    return report


def load_solution(game, paths):
    """Rebuild a Nash solution from trajectory files; states are re-rolled from the inputs."""
    inputs, mismatch = {}, {}
    for path in paths:
        with open(path, encoding="utf8") as f:
            xi, meta, _ = read_trajectory(f)
        i = int(meta.get("robot", len(inputs)))
        inputs[i] = xi
    if sorted(inputs) != list(game.ids):
        raise ConfigurationError(
            "solution files cover robots {}, scenario has {}".format(sorted(inputs), list(game.ids))
        )
    trajectories = {}
    for robot in game.robots:
        xi = inputs[robot.id]
        if xi.u.shape != (game.T, robot.mu):
            raise ShapeError("solution of robot {} has the wrong shape".format(robot.id))
        x = rollout(robot, xi.u, game.T)
        mismatch[robot.id] = float(np.max(np.abs(x - xi.x)))
        trajectories[robot.id] = Trajectory(x, xi.u)
    costates = {}
    for robot in game.robots:
        neighbor_x = {j: trajectories[j].x for j in robot.neighbors}
        xi = trajectories[robot.id]
        costates[robot.id] = backward_costates(robot, xi.x, xi.u, neighbor_x)
    return NashSolution(trajectories, costates, converged=True), mismatch


def cmd_verify(scenario, solution_paths, out_dir, theta=None, **overrides):
    report = RunReport(scenario.name, "verify")
    game = load_theta(scenario.game, theta)
    paths = []
    for path in solution_paths:
        if os.path.isdir(path):
            paths.extend(sorted(glob.glob(os.path.join(path, "robot_*.csv"))))
        else:
            paths.append(path)
    solution, mismatch = load_solution(game, paths)

    residual = pmp_residual(game, solution)
    flags = check_input_hessian(game, solution)
    rows = []
    for robot in game.robots:
        check = best_response_check(game, solution, robot.id)
        rows.append(
            {
                "robot": robot.id,
                "pmp_residual": residual[robot.id],
                "objective": check.before,
                "improvement": check.improvement,
                "relative_improvement": check.relative,
                "conclusive": check.conclusive,
                "hessian_pd": all(flags[robot.id].values()),
                "state_mismatch": mismatch[robot.id],
            }
        )
    summary = {"robots": rows}
    if game.is_lq():
        try:
            exact = dense_nash_lq(game)
            summary["dense_mismatch"] = max(
                float(
                    np.max(np.abs(exact.trajectories[i].flat() - solution.trajectories[i].flat()))
                )
                for i in game.ids
            )
        except DegenerateGameError as e:
            summary["dense_mismatch"] = None
            logger.warning(str(e))
    _write_csv(report, _out(out_dir, "verify.csv"), rows)
    path = _out(out_dir, "verify.json")
    with open(path, "w", encoding="utf8") as f:
        json.dump(summary, f, indent=4)
    report.add_file(path)
    report.summary = summary
    return report


def write_report(report, out_dir):
    path = _out(out_dir, "report.json")
    report.add_file(path)
    with open(path, "w", encoding="utf8") as f:
        json.dump(report.to_json(), f, indent=4, default=str)
    return path
