import csv
import json
import os

import numpy as np
import pytest

import nashlearn.__main__ as cli
from nashlearn import Scenario, __version__
from nashlearn.components.problem import Trajectory
from nashlearn.core import initial_game, load_demos
from nashlearn.errors import (
    AssemblyError,
    ConfigurationError,
    DegenerateGameError,
    LocalityViolation,
    StaleSensitivityError,
    StepSizeError,
    UnsolvableSystemError,
)
from nashlearn.export import read_trajectory, write_trajectory
from nashlearn.learning import loss

LQ_PAIR = "scenarios/lq_pair.xml"
TRIVIAL = "scenarios/trivial.xml"
FORMATION_A = "scenarios/formation_a.xml"
FORMATION_A_SIDE = "scenarios/formation_a_side.xml"
FORMATION_C = "scenarios/formation_c.xml"
UNICYCLE_SMALL = "scenarios/unicycle_small.xml"


def run(*argv):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(list(argv))
    return excinfo.value.code


def report_of(out):
    with open(os.path.join(out, "report.json"), encoding="utf8") as f:
        return json.load(f)


def read_csv_trajectory(path):
    with open(path, encoding="utf8") as f:
        return read_trajectory(f)


def test_version(capsys):
    assert run("--version") is None
    assert capsys.readouterr().out.strip() == __version__


def test_no_command():
    assert run() == 3


def test_forward_trivial(tmp_path):
    out = str(tmp_path)
    assert run("forward", "--scenario", TRIVIAL, "--out", out) == 0
    report = report_of(out)
    assert report["summary"]["converged"]
    assert report["summary"]["iterations"] <= 5
    assert set(report["audit"]["edges"]) == {"0-1"}
    assert report["audit"]["violations"] == []
    for name in ["robot_0.csv", "robot_1.csv", "residuals.csv", "hessian.csv", "audit.csv"]:
        assert os.path.exists(os.path.join(out, name))


def test_forward_then_verify(tmp_path):
    out = str(tmp_path / "forward")
    checked = str(tmp_path / "verify")
    assert run("forward", "--scenario", LQ_PAIR, "--out", out) == 0
    assert run("verify", "--scenario", LQ_PAIR, "--solution", out, "--out", checked) == 0
    with open(os.path.join(checked, "verify.json"), encoding="utf8") as f:
        summary = json.load(f)
    assert summary["dense_mismatch"] < 1e-6
    for row in summary["robots"]:
        assert row["pmp_residual"] < 1e-6
        assert row["improvement"] <= 1e-8
        assert row["hessian_pd"]


def test_verify_flags_corrupted_solution(tmp_path):
    out = str(tmp_path / "forward")
    checked = str(tmp_path / "verify")
    assert run("forward", "--scenario", LQ_PAIR, "--out", out) == 0
    path = os.path.join(out, "robot_0.csv")
    xi, _, _ = read_csv_trajectory(path)
    u = np.array(xi.u)
    u[3] += 1.0
    with open(path, "w", encoding="utf8", newline="") as f:
        write_trajectory(f, Trajectory(xi.x, u), robot=0)

    assert run("verify", "--scenario", LQ_PAIR, "--solution", out, "--out", checked) == 0
    rows = report_of(checked)["summary"]["robots"]
    assert rows[0]["pmp_residual"] > 1e-3
    assert rows[0]["improvement"] > 0
    assert rows[0]["state_mismatch"] > 0


def test_make_demos_matches_forward(tmp_path):
    forward = str(tmp_path / "forward")
    first = str(tmp_path / "demos_a")
    second = str(tmp_path / "demos_b")
    assert run("forward", "--scenario", LQ_PAIR, "--out", forward) == 0
    assert run("make-demos", "--scenario", LQ_PAIR, "--out", first) == 0
    assert run("make-demos", "--scenario", LQ_PAIR, "--out", second) == 0

    for i in range(2):
        name = "demo_0_robot_{}.csv".format(i)
        with open(os.path.join(first, name), encoding="utf8") as a:
            with open(os.path.join(second, name), encoding="utf8") as b:
                assert a.read() == b.read()
        demo, meta, _ = read_csv_trajectory(os.path.join(first, name))
        solved, _, _ = read_csv_trajectory(os.path.join(forward, "robot_{}.csv".format(i)))
        assert np.array_equal(demo.x, solved.x)
        assert meta["provenance"] == "synthetic"

    demos = load_demos([os.path.join(first, "demo_0_robot_{}.csv".format(i)) for i in range(2)])
    solved, _, _ = read_csv_trajectory(os.path.join(forward, "robot_1.csv"))
    assert loss(None, solved, demos[1]) == 0.0


def test_inverse_from_the_truth(tmp_path):
    demos = str(tmp_path / "demos")
    out = str(tmp_path / "inverse")
    assert run("make-demos", "--scenario", LQ_PAIR, "--out", demos) == 0
    code = run(
        "inverse", "--scenario", LQ_PAIR, "--demos", demos, "--init", "truth", "--out", out
    )
    assert code == 0
    report = report_of(out)
    assert report["summary"]["converged"]
    assert report["summary"]["param_error"] == 0.0
    for name in ["theta.json", "trace.csv", "learned_robot_0.csv"]:
        assert os.path.exists(os.path.join(out, name))


def test_not_converged(tmp_path):
    out = str(tmp_path)
    assert run("forward", "--scenario", LQ_PAIR, "--out", out, "--max-iters", "1") == 2
    assert not report_of(out)["summary"]["converged"]


def test_configuration_errors(tmp_path):
    assert run("forward", "--scenario", str(tmp_path / "missing.xml"), "--out", str(tmp_path)) == 3
    broken = tmp_path / "broken.xml"
    broken.write_text('<scenario T="0" dt="0.1"/>')
    assert run("forward", "--scenario", str(broken), "--out", str(tmp_path)) == 3
    assert run("inverse", "--scenario", TRIVIAL, "--demos", str(tmp_path / "none")) == 3


def test_locality_violation(tmp_path, monkeypatch):
    seen = []

    def leaky(*args, **kwargs):
        seen.append(kwargs["strict"])
        raise LocalityViolation(0, 2, 1)

    monkeypatch.setattr(cli, "cmd_forward", leaky)
    out = str(tmp_path)
    assert run("forward", "--scenario", TRIVIAL, "--out", out) == 4
    assert run("forward", "--scenario", TRIVIAL, "--out", out, "--strict-locality") == 4
    assert seen == [True, True]


def test_permissive_locality(tmp_path):
    out = str(tmp_path)
    assert run("forward", "--scenario", TRIVIAL, "--out", out, "--permissive-locality") == 0
    assert report_of(out)["audit"]["violations"] == []


@pytest.mark.parametrize(
    "error",
    [
        AssemblyError("non-finite block", 0, 1, "N_u"),
        UnsolvableSystemError("singular"),
        DegenerateGameError("no robots move"),
        StaleSensitivityError("old θ"),
        StepSizeError("alpha too large", step=3),
    ],
)
def test_numerical_failures_exit_not_converged(tmp_path, monkeypatch, error):
    def failing(*args, **kwargs):
        raise error

    monkeypatch.setattr(cli, "cmd_forward", failing)
    assert run("forward", "--scenario", TRIVIAL, "--out", str(tmp_path)) == 2


def test_random_start_is_seeded():
    scenario = Scenario.open(LQ_PAIR)
    truth = scenario.true_game().theta
    first, start = initial_game(scenario, "random", seed=3)
    again, _ = initial_game(scenario, "random", seed=3)
    other, _ = initial_game(scenario, "random", seed=4)
    assert start == 0
    assert np.array_equal(first.theta, again.theta)
    assert not np.array_equal(first.theta, other.theta)
    assert not np.array_equal(first.theta, truth)
    assert np.all(first.theta > 0)
    with pytest.raises(ConfigurationError):
        initial_game(scenario, "truth", seed=1)


def test_seed_needs_random_start(tmp_path):
    demos = str(tmp_path / "demos")
    out = str(tmp_path / "inverse")
    assert run("make-demos", "--scenario", LQ_PAIR, "--out", demos) == 0
    code = run(
        "inverse",
        "--scenario",
        LQ_PAIR,
        "--demos",
        demos,
        "--init",
        "truth",
        "--seed",
        "1",
        "--out",
        out,
    )
    assert code == 3


def start_error(filename, scale):
    """Parameter error of a run started at ``scale`` times the true parameters."""
    truth = Scenario.open(filename).theta_star
    return abs(scale - 1.0) * np.sqrt(sum(np.sum(np.square(v)) for v in truth.values()))


@pytest.mark.slow
@pytest.mark.parametrize("filename", [FORMATION_A, FORMATION_A_SIDE])
def test_formation_clears_obstacles(tmp_path, filename):
    out = str(tmp_path)
    assert run("forward", "--scenario", filename, "--out", out) == 0
    report = report_of(out)
    assert all(c >= 0 for c in report["summary"]["clearance"].values())
    assert report["audit"]["violations"] == []


@pytest.mark.slow
@pytest.mark.parametrize("filename", [UNICYCLE_SMALL, FORMATION_A])
def test_forward_input_hessians_are_positive_definite(tmp_path, filename):
    out = str(tmp_path)
    assert run("forward", "--scenario", filename, "--out", out) == 0
    assert report_of(out)["summary"]["hessian_pd"]
    with open(os.path.join(out, "hessian.csv"), encoding="utf8") as f:
        rows = list(csv.DictReader(f))
    assert rows
    assert all(row["positive_definite"] == "True" for row in rows)


@pytest.mark.slow
def test_formation_inverse(tmp_path):
    demos = str(tmp_path / "demos")
    out = str(tmp_path / "inverse")
    assert run("make-demos", "--scenario", FORMATION_A, "--out", demos) == 0
    code = run(
        "inverse", "--scenario", FORMATION_A, "--demos", demos, "--init", "1.5", "--out", out
    )
    assert code == 0
    summary = report_of(out)["summary"]
    assert summary["converged"]
    assert summary["iterations"] > 1
    assert summary["total_loss"] <= 0.03
    assert summary["param_error"] < start_error(FORMATION_A, 1.5)


@pytest.mark.slow
def test_mixed_formation_inverse(tmp_path):
    demos = str(tmp_path / "demos")
    out = str(tmp_path / "inverse")
    assert run("make-demos", "--scenario", FORMATION_C, "--out", demos) == 0
    code = run(
        "inverse", "--scenario", FORMATION_C, "--demos", demos, "--init", "0.5", "--out", out
    )
    assert code == 0
    summary = report_of(out)["summary"]
    assert summary["converged"]
    assert summary["param_error"] < start_error(FORMATION_C, 0.5)
