import numpy as np
import pytest
from scipy import io as scipy_io

from nashlearn import Scenario
from nashlearn.components.dynamics import Curvature, SingleIntegrator
from nashlearn.components.problem import neighbor_states_at
from nashlearn.errors import AssemblyError, ShapeError
from nashlearn.fabric import CommFabric
from nashlearn.forward import ShootingConfig, input_gradient, solve_nash
from nashlearn.oracles import (
    dense_nash_lq,
    fd_sensitivity_matrix,
    global_matrix,
    numerical_jacobian,
)
from nashlearn.sensitivity import (
    StackedRobotSystem,
    YLayout,
    assemble_blocks,
    build_global_view,
    dense_global_matrix,
    differential_conditions,
    dump_stacked,
    orthonormalize_rows,
    stack_time,
)

UNICYCLES = "scenarios/unicycle_small.xml"


def unicycle_solution(seed=0):
    game = Scenario.open(UNICYCLES).game
    rng = np.random.default_rng(seed)
    init = {i: rng.uniform(0.1, 0.3, (game.T, 2)) for i in game.ids}
    return game, solve_nash(game, init, ShootingConfig(max_iters=0))


def state_gradient(robot, t, x, u, neighbor_x, lam):
    cost = robot.running(t, x, u, neighbor_x, order=1)
    fx = robot.dynamics.jacobians(x, u, robot.theta_dyn).fx
    return cost.gx + fx.T @ lam


def stacked_for(game, solution):
    blocks = assemble_blocks(game, solution)
    return blocks, {i: stack_time(blocks[i], game.T) for i in game.ids}


def test_layout():
    layout = YLayout(3, 2, 4)
    assert layout.size == 3 * 5 + 2 * 4 + 3 * 5
    assert layout.x(4) == slice(12, 15)
    assert layout.u(0) == slice(15, 17)
    assert layout.lam(0) == slice(23, 26)
    assert layout.trajectory == slice(0, 23)


def test_lq_blocks_are_time_invariant(small_lq):
    blocks = assemble_blocks(small_lq, dense_nash_lq(small_lq))
    for robot_blocks in blocks.values():
        first = robot_blocks.steps[0]
        for step in robot_blocks.steps[1:]:
            for name in ["M_lam", "N_lam", "M_u", "N_u", "S_u", "M_x", "N_x", "S_x"]:
                assert np.array_equal(getattr(step, name), getattr(first, name))
            for j in step.Q_u:
                assert np.array_equal(step.Q_u[j], first.Q_u[j])
                assert np.array_equal(step.Q_x[j], first.Q_x[j])


def test_blocks_are_derivatives_of_the_conditions():
    game, solution = unicycle_solution()
    blocks = assemble_blocks(game, solution)
    tol = 1e-6
    for robot in game.robots:
        i = robot.id
        xi = solution.trajectories[i]
        neighbor_x = solution.neighbor_states(robot)
        s = game.theta_slices[i]
        for t in [0, 3, game.T - 1]:
            x, u = np.array(xi.x[t]), np.array(xi.u[t])
            lam = solution.costates[i].next_of(t)
            nx = neighbor_states_at(neighbor_x, t)
            step = blocks[i].steps[t]

            def grad_u(xv=x, uv=u, nv=nx, rob=robot):
                return input_gradient(rob, t, xv, uv, nv, lam)

            def grad_x(xv=x, uv=u, nv=nx, rob=robot):
                return state_gradient(rob, t, xv, uv, nv, lam)

            assert np.allclose(step.M_u, numerical_jacobian(lambda v: grad_u(xv=v), x), atol=tol)
            assert np.allclose(step.N_u, numerical_jacobian(lambda v: grad_u(uv=v), u), atol=tol)
            assert np.allclose(step.M_x, numerical_jacobian(lambda v: grad_x(xv=v), x), atol=tol)
            assert np.allclose(step.N_x, numerical_jacobian(lambda v: grad_x(uv=v), u), atol=tol)
            for j in robot.neighbors:

                def moved(v, j=j):
                    return {**nx, j: v}

                fd_u = numerical_jacobian(lambda v: grad_u(nv=moved(v)), nx[j])
                fd_x = numerical_jacobian(lambda v: grad_x(nv=moved(v)), nx[j])
                assert np.allclose(step.Q_u[j], fd_u, atol=tol)
                assert np.allclose(step.Q_x[j], fd_x, atol=tol)

            def at_theta(theta_i, fn):
                return fn(rob=robot.with_theta(theta_i))

            theta_i = robot.theta
            fd_cu = numerical_jacobian(lambda v: at_theta(v, grad_u), theta_i)
            fd_cx = numerical_jacobian(lambda v: at_theta(v, grad_x), theta_i)
            assert np.allclose(step.C_u[:, s], fd_cu, atol=tol)
            assert np.allclose(step.C_x[:, s], fd_cx, atol=tol)

            fd_clam = numerical_jacobian(
                lambda v: robot.with_theta(v).step(x, u), theta_i
            )
            assert np.allclose(step.C_lam[:, s], fd_clam, atol=tol)


def test_transpose_pairs():
    game, solution = unicycle_solution(1)
    for robot_blocks in assemble_blocks(game, solution).values():
        for step in robot_blocks.steps:
            assert np.allclose(step.N_x, step.M_u.T)
            assert np.array_equal(step.S_u, step.N_lam.T)
            assert np.array_equal(step.S_x, step.M_lam.T)
            assert np.allclose(step.M_x, step.M_x.T)
            assert np.allclose(step.N_u, step.N_u.T)


def test_parameter_columns_are_local():
    game, solution = unicycle_solution(2)
    _, stacked = stacked_for(game, solution)
    for i, system in stacked.items():
        outside = np.ones(game.r, dtype=bool)
        outside[game.theta_slices[i]] = False
        assert system.C_bar.shape == (system.rows, game.r)
        assert np.array_equal(system.C_bar[:, outside], np.zeros((system.rows, outside.sum())))


def test_lone_robot_has_no_coupling(make_lone_robot):
    game = make_lone_robot(T=1)
    blocks, stacked = stacked_for(game, dense_nash_lq(game))
    assert blocks[0].steps[0].Q_u == {}
    assert blocks[0].Q_xT == {}
    assert stacked[0].A_ij == {}
    names = [(name, t) for name, t, _ in stacked[0].block_rows]
    assert names == [
        ("dynamics", 0),
        ("stationarity", 0),
        ("costate", 0),
        ("terminal", 1),
        ("initial", 0),
    ]
    assert stacked[0].A_ii.shape == (5, 5)


def test_zero_coupling_weights(small_lq):
    game = small_lq.with_theta([1.0, 0.0, 0.8, 0.0])
    _, stacked = stacked_for(game, dense_nash_lq(game))
    for system in stacked.values():
        for A in system.A_ij.values():
            assert not np.any(A)


def test_square_global_system(small_lq):
    _, stacked = stacked_for(small_lq, dense_nash_lq(small_lq))
    A, b, columns = global_matrix(stacked)
    assert A.shape[0] == A.shape[1]
    assert b.shape == (A.shape[0], small_lq.r)
    assert np.linalg.matrix_rank(A) == A.shape[0]


def test_conditions_match_stacked_form():
    game, solution = unicycle_solution(3)
    blocks, stacked = stacked_for(game, solution)
    rng = np.random.default_rng(4)
    Y = {i: rng.normal(size=(stacked[i].layout.size, game.r)) for i in game.ids}
    for i in game.ids:
        neighbor_Y = {j: Y[j] for j in stacked[i].A_ij}
        by_rows = differential_conditions(blocks[i], Y[i], neighbor_Y)
        stacked_form = stacked[i].residual(Y[i], neighbor_Y)
        assert np.allclose(by_rows, stacked_form, atol=1e-12)


def test_stacked_residual_needs_all_neighbors(small_lq):
    _, stacked = stacked_for(small_lq, dense_nash_lq(small_lq))
    system = stacked[0]
    with pytest.raises(ShapeError):
        system.residual(np.zeros((system.layout.size, 4)), {})


def test_stack_time_checks_horizon(small_lq):
    blocks = assemble_blocks(small_lq, dense_nash_lq(small_lq))
    with pytest.raises(AssemblyError):
        stack_time(blocks[0], small_lq.T + 1)


@pytest.mark.slow
def test_finite_difference_sensitivities_satisfy_the_system():
    scenario = Scenario.open(UNICYCLES)
    game = scenario.game
    solution = solve_nash(game, cfg=scenario.shooting)
    _, stacked = stacked_for(game, solution)
    fd = fd_sensitivity_matrix(game, cfg=scenario.shooting)
    for i in game.ids:
        neighbor_Y = {j: fd[j] for j in stacked[i].A_ij}
        residual = stacked[i].residual(fd[i], neighbor_Y)
        assert np.max(np.abs(residual)) < 1e-4


def test_global_view_structure():
    game, solution = unicycle_solution(5)
    _, stacked = stacked_for(game, solution)
    fabric = CommFabric(game.graph)
    views = build_global_view(stacked, fabric, orthonormal=False)
    for i, view in views.items():
        for ell, rows in view.row_offsets.items():
            block = view.Psi[rows]
            if ell == i:
                assert np.array_equal(block, stacked[i].A_ii)
            elif ell in game.graph.neighbors(i):
                assert np.array_equal(block, stacked[ell].A_ij[i])
            else:
                assert not np.any(block)
    assert set(fabric.audit.counts) == set(game.graph.edges)

    Psi, Chat = dense_global_matrix(views)
    A, b, _ = global_matrix(stacked)
    assert np.array_equal(Psi, A)
    assert np.array_equal(Chat, -b)


def test_orthonormal_global_view():
    game, solution = unicycle_solution(5)
    _, stacked = stacked_for(game, solution)
    views = build_global_view(stacked, CommFabric(game.graph))
    Psi, Chat = dense_global_matrix(views)
    for rows in views[0].row_offsets.values():
        block = Psi[rows]
        assert np.allclose(block @ block.T, np.eye(block.shape[0]), atol=1e-10)
    for i, view in views.items():
        for ell, rows in view.row_offsets.items():
            if ell != i and ell not in game.graph.neighbors(i):
                assert not np.any(view.Psi[rows])

    # same solution set as the raw system
    A, b, _ = global_matrix(stacked)
    Y = np.linalg.solve(A, b)
    assert np.allclose(Psi @ Y + Chat, 0.0, atol=1e-7)
    assert np.linalg.cond(Psi) < np.linalg.cond(A)


def test_rank_deficient_rows_are_left_alone(small_lq):
    _, stacked = stacked_for(small_lq, dense_nash_lq(small_lq))
    system = stacked[0]
    A_ii = system.A_ii.copy()
    A_ii[1] = A_ii[0]
    A_ij = {j: A.copy() for j, A in system.A_ij.items()}
    for A in A_ij.values():
        A[1] = A[0]
    broken = StackedRobotSystem(
        system.robot, system.layout, A_ii, A_ij, system.C_bar, system.block_rows
    )
    assert orthonormalize_rows(broken) is broken


def test_non_finite_curvature_is_reported(small_lq, monkeypatch):
    solution = dense_nash_lq(small_lq)

    def poisoned(self, x, u, params, lam):
        nan = np.full((self.mu, self.mu), np.nan)
        return Curvature(
            np.zeros((self.n, self.n)),
            np.zeros((self.n, self.mu)),
            nan,
            np.zeros((self.n, self.p)),
            np.zeros((self.mu, self.p)),
        )

    monkeypatch.setattr(SingleIntegrator, "curvature", poisoned)
    with pytest.raises(AssemblyError) as excinfo:
        assemble_blocks(small_lq, solution)
    assert excinfo.value.robot == 0
    assert excinfo.value.t == 0
    assert excinfo.value.block == "N_u"


def test_dump_stacked(small_lq, tmp_path):
    _, stacked = stacked_for(small_lq, dense_nash_lq(small_lq))
    target = tmp_path / "robot_0.mtx"
    dump_stacked(stacked[0], str(target))
    read = scipy_io.mmread(str(target))
    assert np.allclose(read.toarray(), stacked[0].to_sparse().toarray())
