import csv
import io
import json

import numpy as np

from nashlearn.components.problem import Trajectory
from nashlearn.errors import ConfigurationError
from nashlearn.forward import CostateTrajectory

TRAJECTORY_FORMAT = "nashlearn-trajectory"
TRAJECTORY_VERSION = "v1"
FLOAT_FORMAT = "{:.17g}"


def _number(value):
    return FLOAT_FORMAT.format(float(value))


def write_trajectory(f, xi, costates=None, **meta):
    """Write one robot's trajectory as CSV with a versioned header comment.

    Row ``t`` holds ``x^t``, ``u^t`` (empty at ``t = T``) and ``lambda^t``
    (empty at ``t = 0``).
    """
    n, mu, T = xi.x.shape[1], xi.u.shape[1], xi.T
    header = " ".join("{}={}".format(k, v) for k, v in sorted(meta.items()))
    f.write("# {} {} {}\n".format(TRAJECTORY_FORMAT, TRAJECTORY_VERSION, header).rstrip() + "\n")
    columns = (
        ["t"]
        + ["x{}".format(k) for k in range(n)]
        + ["u{}".format(k) for k in range(mu)]
        + (["lambda{}".format(k) for k in range(n)] if costates is not None else [])
    )
    writer = csv.DictWriter(f, columns, lineterminator="\n")
    writer.writeheader()
    for t in range(T + 1):
        row = {"t": t}
        for k in range(n):
            row["x{}".format(k)] = _number(xi.x[t, k])
        for k in range(mu):
            row["u{}".format(k)] = _number(xi.u[t, k]) if t < T else ""
        if costates is not None:
            for k in range(n):
                row["lambda{}".format(k)] = _number(costates.at(t)[k]) if t > 0 else ""
        writer.writerow(row)


def read_trajectory(f):
    """Return ``(trajectory, meta, costates)``; ``costates`` is ``None`` when absent."""
    first = f.readline()
    parts = first.lstrip("#").split()
    if len(parts) < 2 or parts[0] != TRAJECTORY_FORMAT:
        raise ConfigurationError("not a trajectory file", 1)
    if parts[1] != TRAJECTORY_VERSION:
        raise ConfigurationError("unsupported trajectory version {}".format(parts[1]), 1)
    meta = dict(p.split("=", 1) for p in parts[2:] if "=" in p)

    reader = csv.DictReader(f)
    fields = reader.fieldnames or []
    n = sum(1 for c in fields if c.startswith("x"))
    mu = sum(1 for c in fields if c.startswith("u"))
    has_lambda = any(c.startswith("lambda") for c in fields)
    x, u, lam = [], [], []
    for line, row in enumerate(reader, start=3):
        try:
            x.append([float(row["x{}".format(k)]) for k in range(n)])
            if mu and row.get("u0", "") != "":
                u.append([float(row["u{}".format(k)]) for k in range(mu)])
            if has_lambda and row.get("lambda0", "") != "":
                lam.append([float(row["lambda{}".format(k)]) for k in range(n)])
        except (TypeError, ValueError) as e:
            raise ConfigurationError("bad trajectory row: {}".format(e), line)
    if not x:
        raise ConfigurationError("trajectory file has no rows", 2)
    xi = Trajectory(np.array(x), np.array(u).reshape(len(x) - 1, mu))
    costates = None
    if has_lambda and lam:
        costates = CostateTrajectory(np.array(lam))
    return xi, meta, costates


def trajectory_to_string(xi, costates=None, **meta):
    buffer = io.StringIO()
    write_trajectory(buffer, xi, costates, **meta)
    return buffer.getvalue()


def write_table(f, rows):
    """Write a list of dicts as CSV with the union of their keys as columns."""
    columns = {}
    for r in rows:
        columns = {**columns, **dict.fromkeys(r.keys())}
    writer = csv.DictWriter(f, list(columns.keys()), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(
            {k: _number(v) if isinstance(v, float) else v for k, v in r.items()}
        )


def residual_table(history, robot_history, label="max_residual"):
    rows = []
    for k, (worst, per_robot) in enumerate(zip(history, robot_history)):
        row = {"iteration": k, label: worst}
        for i, v in sorted(per_robot.items()):
            row["robot_{}".format(i)] = v
        rows.append(row)
    return rows


def write_checkpoint(path, k, theta, trace=None):
    payload = {
        "iteration": k,
        "theta": {str(i): np.asarray(v).tolist() for i, v in sorted(theta.items())},
    }
    if trace is not None:
        payload["trace"] = trace.to_table()
    with open(path, "w", encoding="utf8") as f:
        json.dump(payload, f, indent=4)


def read_checkpoint(path):
    """Return ``(iteration, theta)`` from a checkpoint written by ``write_checkpoint``."""
    try:
        with open(path, encoding="utf8") as f:
            payload = json.load(f)
        theta = {int(i): np.array(v, dtype=float) for i, v in payload["theta"].items()}
        return int(payload.get("iteration", 0)), theta
    except (KeyError, ValueError) as e:
        raise ConfigurationError("bad checkpoint {}: {}".format(path, e))
