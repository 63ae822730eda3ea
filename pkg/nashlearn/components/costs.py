"""Cost terms whose weighted sum forms a robot's running and terminal cost.

Every term evaluates its unweighted feature together with the gradient and
Hessian over the joint vector ``z = (x_i, u_i, x_j for j in sorted neighbours)``.
``CostModel`` scatters those into the full joint space and slices out the
blocks the solvers need.
"""
from typing import Dict, NamedTuple

import numpy as np

from nashlearn.errors import ConfigurationError, ShapeError, TopologyError

RECIPROCAL_SMOOTHING = 1e-3

STAGES = ("running", "terminal", "both")


class Layout:
    def __init__(self, n, mu, neighbor_dims):
        self.n = n
        self.mu = mu
        self.offsets = {}
        offset = n + mu
        for j in sorted(neighbor_dims):
            self.offsets[j] = (offset, neighbor_dims[j])
            offset += neighbor_dims[j]
        self.size = offset

    def x(self, idx=None):
        if idx is None:
            return np.arange(self.n)
        return np.asarray(idx)

    def u(self):
        return np.arange(self.n, self.n + self.mu)

    def neighbor(self, j, idx=None):
        if j not in self.offsets:
            raise TopologyError("state of neighbour {} was not provided".format(j))
        offset, size = self.offsets[j]
        if idx is None:
            return np.arange(offset, offset + size)
        return offset + np.asarray(idx)


class CostEval(NamedTuple):
    value: float
    gx: np.ndarray
    gu: np.ndarray
    gn: Dict[int, np.ndarray]
    hxx: np.ndarray
    hxu: np.ndarray
    huu: np.ndarray
    hxn: Dict[int, np.ndarray]
    hun: Dict[int, np.ndarray]
    features: np.ndarray
    dx_theta: np.ndarray
    du_theta: np.ndarray


def _quadratic(A, z, b):
    residual = A @ z - b
    return residual @ residual, 2.0 * A.T @ residual, 2.0 * A.T @ A


def _reciprocal(A, z, b, radius):
    delta = A @ z - b
    slack = delta @ delta - radius**2
    size = A.shape[1]
    if slack <= 0:
        return 1.0 / RECIPROCAL_SMOOTHING, np.zeros(size), np.zeros((size, size))
    q = slack + RECIPROCAL_SMOOTHING
    g_delta = -2.0 * delta / q**2
    h_delta = 8.0 * np.outer(delta, delta) / q**3 - 2.0 * np.eye(len(delta)) / q**2
    return 1.0 / q, A.T @ g_delta, A.T @ h_delta @ A


def _pair_selector(dim):
    # maps (p_i, p_j) to p_j - p_i
    return np.hstack([-np.eye(dim), np.eye(dim)])


class CostTerm:
    kind = None
    default_stage = "both"

    def __init__(self, stage=None):
        stage = stage or self.default_stage
        if stage not in STAGES:
            raise ConfigurationError('Unknown cost stage "{}"'.format(stage))
        self.stage = stage

    neighbors = ()

    def applies(self, t, terminal):
        if terminal:
            return self.stage in ("terminal", "both")
        return self.stage in ("running", "both")

    def evaluate(self, t, x, u, xn, layout):
        """Return ``(indices, value, gradient, hessian)`` over the joint layout."""
        raise NotImplementedError

    def __repr__(self):
        return "<{} stage={}>".format(self.__class__.__name__, self.stage)


class EffortTerm(CostTerm):
    kind = "effort"
    default_stage = "running"

    def applies(self, t, terminal):
        return not terminal

    def evaluate(self, t, x, u, xn, layout):
        idx = layout.u()
        value, grad, hess = _quadratic(np.eye(len(idx)), u, np.zeros(len(idx)))
        return idx, value, grad, hess


class FormationTerm(CostTerm):
    """Relative position, distance or velocity error to one neighbour."""

    kind = "formation"
    modes = ("position", "distance", "velocity")

    def __init__(self, neighbor, offset, mode="position", dim=2, velocity_offset=None, stage=None):
        super().__init__(stage)
        if mode not in self.modes:
            raise ConfigurationError('Unknown formation mode "{}"'.format(mode))
        if mode == "velocity" and velocity_offset is None:
            raise ConfigurationError("velocity formation needs a velocity state")
        self.neighbor = int(neighbor)
        self.neighbors = (self.neighbor,)
        self.mode = mode
        self.dim = dim
        self.velocity_offset = velocity_offset
        if mode == "distance":
            self.offset = float(np.atleast_1d(offset)[0])
        else:
            self.offset = np.asarray(offset, dtype=float).reshape(dim)

    def evaluate(self, t, x, u, xn, layout):
        base = np.arange(self.dim)
        if self.mode == "velocity":
            base = base + self.velocity_offset
        idx = np.concatenate([layout.x(base), layout.neighbor(self.neighbor, base)])
        z = np.concatenate([x[base], xn[self.neighbor][base]])
        A = _pair_selector(self.dim)
        if self.mode != "distance":
            value, grad, hess = _quadratic(A, z, self.offset)
            return idx, value, grad, hess

        delta = A @ z
        slack = delta @ delta - self.offset**2
        g_delta = 4.0 * slack * delta
        h_delta = 4.0 * slack * np.eye(self.dim) + 8.0 * np.outer(delta, delta)
        return idx, slack**2, A.T @ g_delta, A.T @ h_delta @ A


class ObstacleTerm(CostTerm):
    """Reciprocal repulsion from a disk of radius ``radius`` around ``center``."""

    kind = "obstacle"

    def __init__(self, center, radius, dim=2, stage=None):
        super().__init__(stage)
        if radius <= 0:
            raise ConfigurationError("safety radius must be positive, got {}".format(radius))
        self.center = np.asarray(center, dtype=float).reshape(dim)
        self.radius = float(radius)
        self.dim = dim

    def evaluate(self, t, x, u, xn, layout):
        idx = layout.x(np.arange(self.dim))
        value, grad, hess = _reciprocal(np.eye(self.dim), x[: self.dim], self.center, self.radius)
        return idx, value, grad, hess


class CollisionTerm(CostTerm):
    kind = "collision"

    def __init__(self, neighbor, radius, dim=2, stage=None):
        super().__init__(stage)
        if radius <= 0:
            raise ConfigurationError("safety radius must be positive, got {}".format(radius))
        self.neighbor = int(neighbor)
        self.neighbors = (self.neighbor,)
        self.radius = float(radius)
        self.dim = dim

    def evaluate(self, t, x, u, xn, layout):
        base = np.arange(self.dim)
        idx = np.concatenate([layout.x(base), layout.neighbor(self.neighbor, base)])
        z = np.concatenate([x[base], xn[self.neighbor][base]])
        selector = _pair_selector(self.dim)
        value, grad, hess = _reciprocal(selector, z, np.zeros(self.dim), self.radius)
        return idx, value, grad, hess


class WaypointTerm(CostTerm):
    """Quadratic pull toward sparse ``(t, point)`` waypoints."""

    kind = "waypoint"

    def __init__(self, waypoints, dim=2, stage=None):
        super().__init__(stage)
        self.dim = dim
        self.waypoints = {}
        for t, point in waypoints:
            self.waypoints[int(t)] = np.asarray(point, dtype=float).reshape(dim)
        if not self.waypoints:
            raise ConfigurationError("waypoint term needs at least one waypoint")

    def applies(self, t, terminal):
        return t in self.waypoints

    def evaluate(self, t, x, u, xn, layout):
        idx = layout.x(np.arange(self.dim))
        value, grad, hess = _quadratic(np.eye(self.dim), x[: self.dim], self.waypoints[t])
        return idx, value, grad, hess


class GoalTerm(CostTerm):
    """Quadratic pull of selected state components (positions by default) to a target."""

    kind = "goal"
    default_stage = "terminal"

    def __init__(self, target, indices=None, dim=2, stage=None):
        super().__init__(stage)
        self.indices = np.arange(dim) if indices is None else np.asarray(indices, dtype=int)
        self.target = np.asarray(target, dtype=float).reshape(len(self.indices))

    def evaluate(self, t, x, u, xn, layout):
        idx = layout.x(self.indices)
        eye = np.eye(len(self.indices))
        value, grad, hess = _quadratic(eye, x[self.indices], self.target)
        return idx, value, grad, hess


class CentroidTerm(CostTerm):
    """Pull of the centroid of this robot and ``neighbors`` toward ``target``.

    Stands in for keeping a slung payload centred between its carriers.
    """

    kind = "centroid"

    def __init__(self, neighbors, target, dim=2, stage=None):
        super().__init__(stage)
        self.neighbors = tuple(sorted(int(j) for j in neighbors))
        self.target = np.asarray(target, dtype=float).reshape(dim)
        self.dim = dim

    def evaluate(self, t, x, u, xn, layout):
        base = np.arange(self.dim)
        idx = np.concatenate(
            [layout.x(base)] + [layout.neighbor(j, base) for j in self.neighbors]
        )
        z = np.concatenate([x[base]] + [xn[j][base] for j in self.neighbors])
        count = 1 + len(self.neighbors)
        A = np.hstack([np.eye(self.dim) / count] * count)
        value, grad, hess = _quadratic(A, z, self.target)
        return idx, value, grad, hess


QUADRATIC_KINDS = ("effort", "goal", "waypoint", "centroid")


def is_quadratic(term):
    if term.kind == "formation":
        return term.mode != "distance"
    return term.kind in QUADRATIC_KINDS


def builtin_cost_terms():
    return {
        FormationTerm.kind: FormationTerm,
        ObstacleTerm.kind: ObstacleTerm,
        CollisionTerm.kind: CollisionTerm,
        WaypointTerm.kind: WaypointTerm,
        EffortTerm.kind: EffortTerm,
        GoalTerm.kind: GoalTerm,
        CentroidTerm.kind: CentroidTerm,
    }


class CostModel:
    """Weighted sum of cost terms.

    ``weights`` holds one weight per term. Terms flagged learnable take their
    weight from the cost segment of θ instead, in term order.
    """

    def __init__(self, terms, weights, learnable=None):
        self.terms = tuple(terms)
        self.weights = np.asarray(weights, dtype=float).reshape(len(self.terms))
        if learnable is None:
            learnable = [True] * len(self.terms)
        self.learnable = np.asarray(learnable, dtype=bool).reshape(len(self.terms))
        self._columns = np.flatnonzero(self.learnable)
        self.weights.setflags(write=False)

    @property
    def n_learnable(self):
        return len(self._columns)

    @property
    def neighbors(self):
        found = set()
        for term in self.terms:
            found.update(term.neighbors)
        return tuple(sorted(found))

    def default_theta(self):
        return self.weights[self._columns].copy()

    def full_weights(self, theta_cost):
        theta_cost = np.asarray(theta_cost, dtype=float)
        if len(theta_cost) != self.n_learnable:
            raise ShapeError(
                "expected {} cost weights, got {}".format(self.n_learnable, len(theta_cost))
            )
        weights = self.weights.copy()
        weights[self._columns] = theta_cost
        return weights

    def is_quadratic(self):
        return all(is_quadratic(term) for term in self.terms)

    def running(self, t, x, u, xn, theta_cost, order=2):
        return self._evaluate(t, x, u, xn, theta_cost, False, order)

    def terminal(self, T, x, xn, theta_cost, order=2):
        return self._evaluate(T, x, np.zeros(0), xn, theta_cost, True, order)

    def _evaluate(self, t, x, u, xn, theta_cost, terminal, order):
        layout = Layout(len(x), len(u), {j: len(xn[j]) for j in xn})
        weights = self.full_weights(theta_cost)
        size = layout.size
        value = 0.0
        grad = np.zeros(size)
        hess = np.zeros((size, size)) if order > 1 else None
        features = np.zeros(self.n_learnable)
        feature_grad = np.zeros((size, self.n_learnable))
        column = {k: c for c, k in enumerate(self._columns)}

        for k, term in enumerate(self.terms):
            if not term.applies(t, terminal):
                continue
            idx, term_value, term_grad, term_hess = term.evaluate(t, x, u, xn, layout)
            value += weights[k] * term_value
            if k in column:
                features[column[k]] = term_value
            if order < 1:
                continue
            grad[idx] += weights[k] * term_grad
            if k in column:
                feature_grad[idx, column[k]] += term_grad
            if order > 1:
                hess[np.ix_(idx, idx)] += weights[k] * term_hess

        n, mu = layout.n, layout.mu
        if hess is None:
            hess = np.zeros((size, size))
        ublock = slice(n, n + mu)
        gn, hxn, hun = {}, {}, {}
        for j, (offset, nj) in layout.offsets.items():
            nblock = slice(offset, offset + nj)
            gn[j] = grad[nblock]
            hxn[j] = hess[:n, nblock]
            hun[j] = hess[ublock, nblock]
        return CostEval(
            value=value,
            gx=grad[:n],
            gu=grad[ublock],
            gn=gn,
            hxx=hess[:n, :n],
            hxu=hess[:n, ublock],
            huu=hess[ublock, ublock],
            hxn=hxn,
            hun=hun,
            features=features,
            dx_theta=feature_grad[:n],
            du_theta=feature_grad[ublock],
        )

    def __repr__(self):
        return "<CostModel terms={}>".format([t.kind for t in self.terms])
