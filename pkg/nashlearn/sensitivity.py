"""Differentiated equilibrium conditions.

Differentiating the forward conditions (dynamics, input stationarity,
costate recursion, terminal costate, initial state) with respect to the
stacked parameter vector gives a linear system in the sensitivities
``X = dx/dTheta``, ``U = du/dTheta`` and ``Lam = dlambda/dTheta``. This module
evaluates the second-derivative blocks along a Nash solution, stacks them over
time for each robot and builds each robot's column of the global system.

Every block-row is written in the form ``lhs = 0``::

    dynamics     M_lam X^t + N_lam U^t - X^{t+1} + C_lam                         t = 0..T-1
    stationarity M_u X^t + N_u U^t + sum_j Q_u[j] X_j^t + S_u Lam^{t+1} + C_u    t = 0..T-1
    costate      M_x X^t + N_x U^t + sum_j Q_x[j] X_j^t + S_x Lam^{t+1} + C_x - Lam^t
    terminal     M_xT X^T + sum_j Q_xT[j] X_j^T + C_xT - Lam^T
    initial      X^0
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import io as scipy_io
from scipy import linalg
from scipy import sparse

from nashlearn.components.problem import neighbor_states_at
from nashlearn.errors import AssemblyError, ShapeError

logger = logging.getLogger(__name__)


class YLayout:
    """Row layout of ``Y_i = [X^0..X^T ; U^0..U^{T-1} ; Lam^0..Lam^T]``."""

    def __init__(self, n, mu, T):
        self.n = n
        self.mu = mu
        self.T = T
        self.u_start = n * (T + 1)
        self.lam_start = self.u_start + mu * T
        self.size = self.lam_start + n * (T + 1)

    def x(self, t):
        return slice(t * self.n, (t + 1) * self.n)

    def u(self, t):
        start = self.u_start + t * self.mu
        return slice(start, start + self.mu)

    def lam(self, t):
        start = self.lam_start + t * self.n
        return slice(start, start + self.n)

    @property
    def trajectory(self):
        """Rows of ``(X, U)``, in the same order as ``Trajectory.flat``."""
        return slice(0, self.lam_start)

    @property
    def rows(self):
        return self.size


@dataclass
class StepBlocks:
    M_lam: np.ndarray
    N_lam: np.ndarray
    C_lam: np.ndarray
    M_u: np.ndarray
    N_u: np.ndarray
    S_u: np.ndarray
    C_u: np.ndarray
    M_x: np.ndarray
    N_x: np.ndarray
    S_x: np.ndarray
    C_x: np.ndarray
    Q_u: Dict[int, np.ndarray] = field(default_factory=dict)
    Q_x: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class SensitivityBlocks:
    robot: int
    n: int
    mu: int
    r: int
    theta_slice: slice
    neighbor_dims: Dict[int, Tuple[int, int]]
    steps: List[StepBlocks]
    M_xT: np.ndarray
    C_xT: np.ndarray
    Q_xT: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def T(self):
        return len(self.steps)


def _theta_columns(r, theta_slice, *parts):
    block = np.zeros((parts[0].shape[0], r))
    block[:, theta_slice] = np.hstack(parts)
    return block


def _check_finite(robot, t, blocks):
    for name, value in blocks.items():
        if isinstance(value, dict):
            for j, sub in value.items():
                if not np.all(np.isfinite(sub)):
                    block = "{}[{}]".format(name, j)
                    raise AssemblyError("non-finite second derivative", robot, t, block)
        elif not np.all(np.isfinite(value)):
            raise AssemblyError("non-finite second derivative", robot, t, name)


def robot_blocks(game, solution, i):
    robot = game.robot(i)
    T = game.T
    theta_slice = game.theta_slices[i]
    r = game.r
    xi = solution.trajectories[i]
    lam = solution.costates[i]
    neighbor_x = solution.neighbor_states(robot)
    neighbor_dims = {j: (game.robot(j).n, game.robot(j).mu) for j in robot.neighbors}
    n, p = robot.n, robot.dynamics.p

    steps = []
    for t in range(T):
        x, u, lam_next = xi.x[t], xi.u[t], lam.next_of(t)
        cost = robot.running(t, x, u, neighbor_states_at(neighbor_x, t), order=2)
        jac = robot.dynamics.jacobians(x, u, robot.theta_dyn)
        curv = robot.dynamics.curvature(x, u, robot.theta_dyn, lam_next)
        H_xu = cost.hxu + curv.xu
        step = StepBlocks(
            M_lam=jac.fx,
            N_lam=jac.fu,
            C_lam=_theta_columns(r, theta_slice, np.zeros((n, robot.cost.n_learnable)), jac.fp),
            M_u=H_xu.T,
            N_u=cost.huu + curv.uu,
            S_u=jac.fu.T,
            C_u=_theta_columns(r, theta_slice, cost.du_theta, curv.up),
            M_x=cost.hxx + curv.xx,
            N_x=H_xu,
            S_x=jac.fx.T,
            C_x=_theta_columns(r, theta_slice, cost.dx_theta, curv.xp),
            Q_u={j: cost.hun[j] for j in robot.neighbors},
            Q_x={j: cost.hxn[j] for j in robot.neighbors},
        )
        _check_finite(i, t, vars(step))
        steps.append(step)

    terminal = robot.terminal(T, xi.x[T], neighbor_states_at(neighbor_x, T), order=2)
    M_xT = terminal.hxx
    C_xT = _theta_columns(r, theta_slice, terminal.dx_theta, np.zeros((n, p)))
    Q_xT = {j: terminal.hxn[j] for j in robot.neighbors}
    _check_finite(i, T, {"M_xT": M_xT, "C_xT": C_xT, "Q_xT": Q_xT})
    return SensitivityBlocks(
        robot=i,
        n=n,
        mu=robot.mu,
        r=r,
        theta_slice=theta_slice,
        neighbor_dims=neighbor_dims,
        steps=steps,
        M_xT=M_xT,
        C_xT=C_xT,
        Q_xT=Q_xT,
    )


def assemble_blocks(game, solution, fabric=None):
    """Evaluate every robot's second-derivative blocks along ``solution``."""
    if not solution.converged:
        logger.warning("assembling sensitivity blocks on a non-converged Nash solution")
    if fabric is not None:
        return fabric.map(lambda i: robot_blocks(game, solution, i))
    return {i: robot_blocks(game, solution, i) for i in game.ids}


@dataclass
class StackedRobotSystem:
    robot: int
    layout: YLayout
    A_ii: np.ndarray
    A_ij: Dict[int, np.ndarray]
    C_bar: np.ndarray
    block_rows: List[Tuple[str, int, slice]]

    @property
    def rows(self):
        return self.A_ii.shape[0]

    @property
    def r(self):
        return self.C_bar.shape[1]

    def residual(self, Y_i, neighbor_Y):
        """``A_ii Y_i + sum_j A_ij Y_j + C_bar``."""
        if set(neighbor_Y) != set(self.A_ij):
            raise ShapeError(
                "robot {} needs neighbour unknowns for {}".format(self.robot, sorted(self.A_ij))
            )
        total = self.A_ii @ Y_i + self.C_bar
        for j, A in self.A_ij.items():
            total = total + A @ neighbor_Y[j]
        return total

    def to_sparse(self):
        """Horizontal concatenation ``[A_ii | A_ij (sorted j) | C_bar]`` as a sparse matrix."""
        parts = [self.A_ii] + [self.A_ij[j] for j in sorted(self.A_ij)] + [self.C_bar]
        return sparse.coo_matrix(np.hstack(parts))


def stack_time(blocks, T=None):
    """Stack one robot's blocks over ``t = 0..T`` into ``A_ii``, ``A_ij`` and ``C_bar``."""
    T = blocks.T if T is None else T
    if T != blocks.T:
        message = "blocks cover {} steps but horizon is {}".format(blocks.T, T)
        raise AssemblyError(message, blocks.robot, None, "stack")
    n, mu, r = blocks.n, blocks.mu, blocks.r
    layout = YLayout(n, mu, T)
    neighbor_layouts = {j: YLayout(nj, muj, T) for j, (nj, muj) in blocks.neighbor_dims.items()}
    rows = layout.rows
    A_ii = np.zeros((rows, layout.size))
    A_ij = {j: np.zeros((rows, lj.size)) for j, lj in neighbor_layouts.items()}
    C_bar = np.zeros((rows, r))
    block_rows = []

    def place(name, t, size, row):
        block_rows.append((name, t, slice(row, row + size)))
        return slice(row, row + size)

    def put(target, rs, cs, value, name, t):
        value = np.asarray(value)
        if value.shape != (rs.stop - rs.start, cs.stop - cs.start):
            raise AssemblyError(
                "block has shape {}".format(value.shape), blocks.robot, t, name
            )
        target[rs, cs] += value

    row = 0
    for t, step in enumerate(blocks.steps):
        rs = place("dynamics", t, n, row)
        put(A_ii, rs, layout.x(t), step.M_lam, "M_lam", t)
        put(A_ii, rs, layout.u(t), step.N_lam, "N_lam", t)
        put(A_ii, rs, layout.x(t + 1), -np.eye(n), "dynamics", t)
        C_bar[rs] = step.C_lam
        row += n
    for t, step in enumerate(blocks.steps):
        rs = place("stationarity", t, mu, row)
        put(A_ii, rs, layout.x(t), step.M_u, "M_u", t)
        put(A_ii, rs, layout.u(t), step.N_u, "N_u", t)
        put(A_ii, rs, layout.lam(t + 1), step.S_u, "S_u", t)
        for j, Q in step.Q_u.items():
            put(A_ij[j], rs, neighbor_layouts[j].x(t), Q, "Q_u", t)
        C_bar[rs] = step.C_u
        row += mu
    for t, step in enumerate(blocks.steps):
        rs = place("costate", t, n, row)
        put(A_ii, rs, layout.x(t), step.M_x, "M_x", t)
        put(A_ii, rs, layout.u(t), step.N_x, "N_x", t)
        put(A_ii, rs, layout.lam(t + 1), step.S_x, "S_x", t)
        put(A_ii, rs, layout.lam(t), -np.eye(n), "costate", t)
        for j, Q in step.Q_x.items():
            put(A_ij[j], rs, neighbor_layouts[j].x(t), Q, "Q_x", t)
        C_bar[rs] = step.C_x
        row += n

    rs = place("terminal", T, n, row)
    put(A_ii, rs, layout.x(T), blocks.M_xT, "M_xT", T)
    put(A_ii, rs, layout.lam(T), -np.eye(n), "terminal", T)
    for j, Q in blocks.Q_xT.items():
        put(A_ij[j], rs, neighbor_layouts[j].x(T), Q, "Q_xT", T)
    C_bar[rs] = blocks.C_xT
    row += n

    rs = place("initial", 0, n, row)
    put(A_ii, rs, layout.x(0), np.eye(n), "initial", 0)
    row += n

    return StackedRobotSystem(blocks.robot, layout, A_ii, A_ij, C_bar, block_rows)


def differential_conditions(blocks, Y_i, neighbor_Y):
    """Evaluate the differentiated conditions row by row, in stacking order."""
    layout = YLayout(blocks.n, blocks.mu, blocks.T)
    nl = {j: YLayout(nj, muj, blocks.T) for j, (nj, muj) in blocks.neighbor_dims.items()}
    T = blocks.T

    def X(t):
        return Y_i[layout.x(t)]

    def U(t):
        return Y_i[layout.u(t)]

    def L(t):
        return Y_i[layout.lam(t)]

    def Xj(j, t):
        return neighbor_Y[j][nl[j].x(t)]

    out = []
    for t, s in enumerate(blocks.steps):
        out.append(s.M_lam @ X(t) + s.N_lam @ U(t) - X(t + 1) + s.C_lam)
    for t, s in enumerate(blocks.steps):
        coupled = sum((Q @ Xj(j, t) for j, Q in s.Q_u.items()), np.zeros_like(s.C_u))
        out.append(s.M_u @ X(t) + s.N_u @ U(t) + coupled + s.S_u @ L(t + 1) + s.C_u)
    for t, s in enumerate(blocks.steps):
        coupled = sum((Q @ Xj(j, t) for j, Q in s.Q_x.items()), np.zeros_like(s.C_x))
        out.append(s.M_x @ X(t) + s.N_x @ U(t) + coupled + s.S_x @ L(t + 1) + s.C_x - L(t))
    coupled = sum((Q @ Xj(j, T) for j, Q in blocks.Q_xT.items()), np.zeros_like(blocks.C_xT))
    out.append(blocks.M_xT @ X(T) + coupled + blocks.C_xT - L(T))
    out.append(X(0))
    return np.vstack(out)


@dataclass
class GlobalSystemView:
    """Robot ``i``'s column of the global system ``sum_i (Psi_i Y_i + Chat_i) = 0``."""

    robot: int
    Psi: np.ndarray
    Chat: np.ndarray
    row_offsets: Dict[int, slice]

    @property
    def rows(self):
        return self.Psi.shape[0]


def row_offsets(sizes):
    offsets, start = {}, 0
    for ell in sorted(sizes):
        offsets[ell] = slice(start, start + sizes[ell])
        start += sizes[ell]
    return offsets


def orthonormalize_rows(system, rtol=1e-12):
    """Left-multiply one robot's block-rows so that ``[A_ii | A_ij...]`` has orthonormal rows.

    With ``[A_ii | A_ij...]' = Q R`` the rows are scaled by ``R^{-T}``, which
    needs only the robot's own blocks and leaves the solution set unchanged.
    A rank-deficient block is returned as is.
    """
    neighbors = sorted(system.A_ij)
    joint = np.hstack([system.A_ii] + [system.A_ij[j] for j in neighbors])
    if joint.shape[0] > joint.shape[1]:
        logger.warning("robot %s has more rows than unknowns; rows left as is", system.robot)
        return system
    _, R = linalg.qr(joint.T, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= rtol * diag.max():
        logger.warning("robot %s block-rows are rank deficient; rows left as is", system.robot)
        return system

    def scale(block):
        return linalg.solve_triangular(R, block, trans="T")

    return StackedRobotSystem(
        system.robot,
        system.layout,
        scale(system.A_ii),
        {j: scale(system.A_ij[j]) for j in neighbors},
        scale(system.C_bar),
        system.block_rows,
    )


def build_global_view(stacked, fabric, orthonormal=True):
    """Form every robot's ``Psi_i`` and ``Chat_i`` from its own blocks and its neighbours'.

    Robot ``ell`` sends ``A_{ell,i}`` to each neighbour ``i``; block-rows of
    non-neighbours stay zero. Only the row counts of the other robots, which
    follow from the public problem dimensions, are shared globally. With
    ``orthonormal`` each robot first passes its rows through
    ``orthonormalize_rows``.
    """
    if orthonormal:
        raw = stacked
        stacked = fabric.map(lambda ell: orthonormalize_rows(raw[ell]), sorted(raw))
    offsets = row_offsets({ell: system.rows for ell, system in stacked.items()})
    total = sum(system.rows for system in stacked.values())
    inbound = fabric.exchange(
        {ell: {i: A for i, A in system.A_ij.items()} for ell, system in stacked.items()}
    )

    def view(i):
        own = stacked[i]
        Psi = np.zeros((total, own.layout.size))
        Psi[offsets[i]] = own.A_ii
        for ell, A in inbound[i].items():
            Psi[offsets[ell]] = A
        Chat = np.zeros((total, own.r))
        Chat[offsets[i]] = own.C_bar
        return GlobalSystemView(i, Psi, Chat, offsets)

    return fabric.map(view, sorted(stacked))


def dense_global_matrix(views):
    """Horizontal concatenation of every ``Psi_i`` and the summed constant block."""
    ids = sorted(views)
    return np.hstack([views[i].Psi for i in ids]), sum(views[i].Chat for i in ids)


def dump_stacked(stacked, target):
    """Write ``[A_ii | A_ij... | C_bar]`` as a matrix-market file."""
    scipy_io.mmwrite(
        target,
        stacked.to_sparse(),
        comment="robot {} rows {}".format(
            stacked.robot, ",".join("{}:{}".format(name, t) for name, t, _ in stacked.block_rows)
        ),
    )
