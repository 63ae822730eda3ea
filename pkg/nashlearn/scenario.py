"""Scenario files: XML documents declaring a game, its ground truth and solver settings.

See README.md for the element reference. Every semantic error is reported
with the line of the offending element.
"""
from typing import NamedTuple

import numpy as np
from lxml import etree

from nashlearn.components import costs
from nashlearn.components.costs import CostModel
from nashlearn.components.dynamics import get_dynamics
from nashlearn.components.graph import CommGraph
from nashlearn.components.problem import GameProblem, RobotProblem
from nashlearn.errors import NashLearnError, ScenarioError
from nashlearn.forward import ShootingConfig
from nashlearn.learning import LearningConfig
from nashlearn.linsolve import SolverConfig


class Disk(NamedTuple):
    center: np.ndarray
    radius: float


class DemoSettings(NamedTuple):
    count: int = 1
    perturbation: float = 0.0
    seed: int = 0
    noise: float = 0.0


TRUE_VALUES = ("true", "1", "yes", "on")
FALSE_VALUES = ("false", "0", "no", "off")


def _floats(text, element, name="value"):
    try:
        return np.array([float(v) for v in (text or "").replace(",", " ").split()])
    except ValueError:
        raise ScenarioError(
            '{} of <{}> must be numbers, got "{}"'.format(name, element.tag, text),
            element.sourceline,
        )


def _float(element, name, default=None):
    value = element.get(name)
    if value is None:
        if default is None:
            raise ScenarioError(
                '<{}> is missing attribute "{}"'.format(element.tag, name), element.sourceline
            )
        return default
    try:
        return float(value)
    except ValueError:
        raise ScenarioError(
            '"{}" of <{}> must be a number, got "{}"'.format(name, element.tag, value),
            element.sourceline,
        )


def _int(element, name, default=None):
    value = _float(element, name, default)
    if value != int(value):
        raise ScenarioError(
            '"{}" of <{}> must be an integer'.format(name, element.tag), element.sourceline
        )
    return int(value)


def _bool(element, name, default=False):
    value = element.get(name)
    if value is None:
        return default
    if value.lower() in TRUE_VALUES:
        return True
    if value.lower() in FALSE_VALUES:
        return False
    raise ScenarioError(
        '"{}" of <{}> must be true or false'.format(name, element.tag), element.sourceline
    )


class ScenarioParser:
    def __init__(self, root):
        self.root = root

    def _get_header(self):
        if self.root.tag != "scenario":
            raise ScenarioError("root element must be <scenario>", self.root.sourceline)
        self.name = self.root.get("name", "scenario")
        self.T = _int(self.root, "T")
        self.dt = _float(self.root, "dt")
        if self.T < 1:
            raise ScenarioError("horizon T must be at least 1", self.root.sourceline)
        if self.dt <= 0:
            raise ScenarioError("dt must be positive", self.root.sourceline)

    def _get_robot_elements(self):
        for s in self.root.iterfind("robot"):
            yield s

    def _get_graph(self):
        m = len(list(self._get_robot_elements()))
        if m < 1:
            raise ScenarioError("scenario declares no robots", self.root.sourceline)
        graph = self.root.find("graph")
        if graph is None:
            raise ScenarioError("scenario has no <graph>", self.root.sourceline)
        kind = graph.get("kind")
        try:
            if kind == "complete":
                self.graph = CommGraph.complete(m)
            elif kind == "line":
                self.graph = CommGraph.line(m)
            elif kind == "ring":
                self.graph = CommGraph.ring(m)
            elif kind is None:
                edges = [(_int(e, "a"), _int(e, "b")) for e in graph.iterfind("edge")]
                self.graph = CommGraph(m, edges)
            else:
                raise ScenarioError('unknown graph kind "{}"'.format(kind), graph.sourceline)
        except ScenarioError:
            raise
        except NashLearnError as e:
            raise ScenarioError(str(e), graph.sourceline)

    def _get_obstacles(self):
        self.obstacles = []
        for s in self.root.iterfind("obstacles/disk"):
            radius = _float(s, "radius")
            if radius <= 0:
                raise ScenarioError("obstacle radius must be positive", s.sourceline)
            self.obstacles.append(Disk(np.array([_float(s, "x"), _float(s, "y")]), radius))

    def _make_term(self, s, robot_id, dynamics):
        kind = s.get("kind")
        catalog = costs.builtin_cost_terms()
        if kind not in catalog:
            raise ScenarioError('cost term "{}" not implemented'.format(kind), s.sourceline)
        dim = dynamics.position_dim
        stage = s.get("stage")
        if kind == "effort":
            return catalog[kind](stage=stage)
        if kind == "formation":
            mode = s.get("mode", "position")
            return catalog[kind](
                _int(s, "neighbor"),
                _floats(s.get("offset"), s, "offset"),
                mode=mode,
                dim=dim,
                velocity_offset=dynamics.velocity_offset,
                stage=stage,
            )
        if kind == "obstacle":
            if s.get("disk") is not None:
                index = _int(s, "disk")
                if not 0 <= index < len(self.obstacles):
                    raise ScenarioError("unknown obstacle disk {}".format(index), s.sourceline)
                disk = self.obstacles[index]
                center, radius = disk.center, disk.radius + _float(s, "clearance", 0.0)
            else:
                center = np.array([_float(s, "x"), _float(s, "y")])
                radius = _float(s, "radius")
            return catalog[kind](center, radius, dim=dim, stage=stage)
        if kind == "collision":
            return catalog[kind](_int(s, "neighbor"), _float(s, "radius"), dim=dim, stage=stage)
        if kind == "waypoint":
            points = [
                (_int(w, "t"), [_float(w, "x"), _float(w, "y")]) for w in s.iterfind("waypoint")
            ]
            for t, _ in points:
                if not 0 <= t <= self.T:
                    raise ScenarioError("waypoint time {} outside 0..T".format(t), s.sourceline)
            return catalog[kind](points, dim=dim, stage=stage)
        if kind == "goal":
            indices = s.get("indices")
            if indices is not None:
                indices = [int(v) for v in _floats(indices, s, "indices")]
            return catalog[kind](
                _floats(s.get("target"), s, "target"), indices=indices, dim=dim, stage=stage
            )
        neighbors = [int(v) for v in _floats(s.get("neighbors"), s, "neighbors")]
        return catalog[kind](neighbors, _floats(s.get("target"), s, "target"), dim=dim, stage=stage)

    def _get_robot(self, s, index):
        robot_id = _int(s, "id")
        if robot_id != index:
            raise ScenarioError(
                "robots must be declared in id order; expected {}".format(index), s.sourceline
            )
        params = {p.get("name"): p for p in s.iterfind("param")}
        gain = params.get("gain")
        try:
            dynamics = get_dynamics(s.get("dynamics", ""))
            kwargs = {"dt": self.dt}
            if gain is not None:
                kwargs["gain"] = _float(gain, "value")
                kwargs["learn_gain"] = _bool(gain, "learnable", True)
            if dynamics.name in ("single_integrator", "double_integrator"):
                kwargs["dim"] = _int(s, "dim", 2)
            dynamics = dynamics(**kwargs)
        except ScenarioError:
            raise
        except NashLearnError as e:
            raise ScenarioError(str(e), s.sourceline)

        x0 = s.find("x0")
        if x0 is None:
            raise ScenarioError("robot {} has no <x0>".format(robot_id), s.sourceline)
        x0_values = _floats(x0.text, x0, "x0")
        if len(x0_values) != dynamics.n:
            raise ScenarioError(
                "x0 of robot {} has {} entries, dynamics need {}".format(
                    robot_id, len(x0_values), dynamics.n
                ),
                x0.sourceline,
            )

        terms, weights, learnable, truth = [], [], [], []
        for t in s.iterfind("cost/term"):
            try:
                term = self._make_term(t, robot_id, dynamics)
            except ScenarioError:
                raise
            except (NashLearnError, ValueError) as e:
                raise ScenarioError(str(e), t.sourceline)
            term.sourceline = t.sourceline
            terms.append(term)
            weights.append(_float(t, "weight"))
            is_learnable = _bool(t, "learnable", True)
            learnable.append(is_learnable)
            if is_learnable:
                truth.append(t.get("true") and _float(t, "true"))
        if not terms:
            raise ScenarioError("robot {} has no cost terms".format(robot_id), s.sourceline)
        if gain is not None and dynamics.learn_gain:
            truth.append(gain.get("true") and _float(gain, "true"))

        cost = CostModel(terms, weights, learnable)
        theta = np.concatenate([cost.default_theta(), dynamics.default_params()])
        try:
            robot = RobotProblem(robot_id, dynamics, cost, x0_values, theta)
        except NashLearnError as e:
            raise ScenarioError(str(e), s.sourceline)
        self._check_start(robot, s)
        truth = None if any(v is None or v == "" for v in truth) else np.array(truth, dtype=float)
        return robot, truth

    def _check_start(self, robot, element):
        position = robot.x0[: robot.dynamics.position_dim]
        for term in robot.cost.terms:
            if term.kind == "obstacle":
                if np.sum((position - term.center) ** 2) <= term.radius**2:
                    raise ScenarioError(
                        "robot {} starts inside an obstacle safety radius".format(robot.id),
                        getattr(term, "sourceline", element.sourceline),
                    )
            if term.kind == "collision":
                self._pairs.append((robot.id, term.neighbor, term.radius, term.sourceline))

    def _get_robots(self):
        self._pairs = []
        robots, truth = [], {}
        for index, s in enumerate(self._get_robot_elements()):
            robot, theta_star = self._get_robot(s, index)
            robots.append(robot)
            truth[robot.id] = theta_star
        try:
            self.game = GameProblem(self.graph, robots, self.T, self.dt)
        except NashLearnError as e:
            raise ScenarioError(str(e), self.root.sourceline)
        for i, j, radius, line in self._pairs:
            dim = self.game.robot(i).dynamics.position_dim
            gap = self.game.robot(i).x0[:dim] - self.game.robot(j).x0[:dim]
            if gap @ gap <= radius**2:
                raise ScenarioError(
                    "robots {} and {} start inside their collision radius".format(i, j), line
                )
        self.theta_star = None if any(v is None for v in truth.values()) else truth

    def _get_configs(self):
        shooting = self.root.find("shooting")
        solver = self.root.find("solver")
        learning = self.root.find("learning")
        demos = self.root.find("demos")
        try:
            self.shooting = ShootingConfig()
            if shooting is not None:
                self.shooting = ShootingConfig(
                    gamma=_float(shooting, "gamma", 1e-2),
                    eps_u=_float(shooting, "eps_u", 1e-4),
                    max_iters=_int(shooting, "max_iters", 5000),
                    backtracking=_bool(shooting, "backtracking", False),
                    shrink=_float(shooting, "shrink", 0.5),
                    armijo=_float(shooting, "armijo", 0.5),
                )
            self.solver = SolverConfig()
            if solver is not None:
                alpha = solver.get("alpha")
                self.solver = SolverConfig(
                    alpha=None if alpha is None else _float(solver, "alpha"),
                    eps_v=_float(solver, "eps_v", 1e-9),
                    max_iters=_int(solver, "max_iters", 200000),
                    orthonormal_rows=_bool(solver, "orthonormal_rows", True),
                )
            self.learning = LearningConfig()
            if learning is not None:
                floor = learning.get("theta_floor")
                self.learning = LearningConfig(
                    eta=_float(learning, "eta", 0.004),
                    decay=_float(learning, "decay", 1.0),
                    max_outer_iters=_int(learning, "max_outer_iters", 500),
                    loss_tol=_float(learning, "loss_tol", 0.0),
                    warm_start=_bool(learning, "warm_start", True),
                    theta_floor=None if floor is None else _float(learning, "theta_floor"),
                )
            self.demos = DemoSettings()
            if demos is not None:
                self.demos = DemoSettings(
                    count=_int(demos, "count", 1),
                    perturbation=_float(demos, "perturbation", 0.0),
                    seed=_int(demos, "seed", 0),
                    noise=_float(demos, "noise", 0.0),
                )
        except ScenarioError:
            raise
        except NashLearnError as e:
            line = next(
                (el.sourceline for el in (shooting, solver, learning, demos) if el is not None),
                None,
            )
            raise ScenarioError(str(e), line)


class Scenario:
    def __init__(self, f):
        try:
            self.tree = etree.parse(f)
        except etree.XMLSyntaxError as e:
            raise ScenarioError("malformed scenario file: {}".format(e.msg), e.lineno)
        self.parser = ScenarioParser(self.tree.getroot())
        self.parser._get_header()
        self.parser._get_graph()
        self.parser._get_obstacles()
        self.parser._get_robots()
        self.parser._get_configs()

    @classmethod
    def open(cls, filename):
        with open(filename, "rb") as a:
            return cls(a)

    def __getattr__(self, name):
        if name == "parser":
            raise AttributeError(name)
        return getattr(self.parser, name)

    def true_game(self):
        if self.theta_star is None:
            raise ScenarioError("scenario declares no ground-truth parameters")
        return self.game.with_theta(self.theta_star)

    def to_json(self):
        return {
            "name": self.name,
            "T": self.T,
            "dt": self.dt,
            "graph": self.graph.to_json(),
            "obstacles": [
                {"center": d.center.tolist(), "radius": d.radius} for d in self.obstacles
            ],
            "robots": [
                {
                    "id": r.id,
                    "dynamics": r.dynamics.to_json(),
                    "x0": r.x0.tolist(),
                    "theta": r.theta.tolist(),
                    "parameters": r.parameter_names(),
                }
                for r in self.game.robots
            ],
            "theta_star": None
            if self.theta_star is None
            else {str(i): v.tolist() for i, v in self.theta_star.items()},
        }
