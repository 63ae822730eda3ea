from typing import NamedTuple

import numpy as np

from nashlearn.errors import ConfigurationError


class Jacobians(NamedTuple):
    fx: np.ndarray
    fu: np.ndarray
    fp: np.ndarray


class Curvature(NamedTuple):
    """Second derivatives of ``lam . f`` in every pairing the sensitivity blocks use."""

    xx: np.ndarray
    xu: np.ndarray
    uu: np.ndarray
    xp: np.ndarray
    up: np.ndarray


class DynamicsModel:
    """Discrete-time model ``x+ = f(x, u, p)``.

    ``p`` holds the learnable dynamics parameters (possibly none). Every
    built-in model has a single optional gain on its input channel; when the
    gain is not learnable it is a fixed constant of the model.
    """

    name = "dynamics"
    linear = False

    def __init__(self, n, mu, dt, gain=1.0, learn_gain=False, position_dim=2):
        if dt <= 0:
            raise ConfigurationError("dt must be positive, got {}".format(dt))
        self.n = n
        self.mu = mu
        self.dt = float(dt)
        self.gain = float(gain)
        self.learn_gain = bool(learn_gain)
        self.position_dim = position_dim
        self.velocity_offset = None

    @property
    def p(self):
        return 1 if self.learn_gain else 0

    @property
    def param_names(self):
        return ("gain",) if self.learn_gain else ()

    def default_params(self):
        return np.array([self.gain]) if self.learn_gain else np.zeros(0)

    def _gain(self, params):
        if self.learn_gain:
            return params[0]
        return self.gain

    def step(self, x, u, params):
        raise NotImplementedError

    def jacobians(self, x, u, params):
        raise NotImplementedError

    def curvature(self, x, u, params, lam):
        raise NotImplementedError

    def _flat_curvature(self):
        return Curvature(
            np.zeros((self.n, self.n)),
            np.zeros((self.n, self.mu)),
            np.zeros((self.mu, self.mu)),
            np.zeros((self.n, self.p)),
            np.zeros((self.mu, self.p)),
        )

    def __repr__(self):
        return "<{} n={} mu={} dt={} gain={}{}>".format(
            self.__class__.__name__,
            self.n,
            self.mu,
            self.dt,
            self.gain,
            " (learnable)" if self.learn_gain else "",
        )

    def to_json(self):
        return {
            "name": self.name,
            "n": self.n,
            "mu": self.mu,
            "dt": self.dt,
            "gain": self.gain,
            "learn_gain": self.learn_gain,
        }


class SingleIntegrator(DynamicsModel):
    name = "single_integrator"
    linear = True

    def __init__(self, dim=2, dt=0.1, gain=1.0, learn_gain=False):
        super().__init__(dim, dim, dt, gain, learn_gain, position_dim=dim)

    def step(self, x, u, params):
        return x + self.dt * self._gain(params) * u

    def jacobians(self, x, u, params):
        fx = np.eye(self.n)
        fu = self.dt * self._gain(params) * np.eye(self.n)
        fp = (self.dt * u).reshape(self.n, 1) if self.learn_gain else np.zeros((self.n, 0))
        return Jacobians(fx, fu, fp)

    def curvature(self, x, u, params, lam):
        curv = self._flat_curvature()
        if self.learn_gain:
            curv.up[:, 0] = self.dt * lam
        return curv


class DoubleIntegrator(DynamicsModel):
    """State ``(p, v)`` with ``p+ = p + dt v`` and ``v+ = v + dt g a``."""

    name = "double_integrator"
    linear = True

    def __init__(self, dim=2, dt=0.1, gain=1.0, learn_gain=False):
        super().__init__(2 * dim, dim, dt, gain, learn_gain, position_dim=dim)
        self.dim = dim
        self.velocity_offset = dim

    def step(self, x, u, params):
        d = self.dim
        pos, vel = x[:d], x[d:]
        return np.concatenate([pos + self.dt * vel, vel + self.dt * self._gain(params) * u])

    def jacobians(self, x, u, params):
        d = self.dim
        fx = np.eye(self.n)
        fx[:d, d:] = self.dt * np.eye(d)
        fu = np.zeros((self.n, d))
        fu[d:, :] = self.dt * self._gain(params) * np.eye(d)
        fp = np.zeros((self.n, self.p))
        if self.learn_gain:
            fp[d:, 0] = self.dt * u
        return Jacobians(fx, fu, fp)

    def curvature(self, x, u, params, lam):
        curv = self._flat_curvature()
        if self.learn_gain:
            curv.up[:, 0] = self.dt * lam[self.dim :]
        return curv


class Unicycle(DynamicsModel):
    """Euler-discretised differential-drive robot.

    State ``(px, py, heading)``, input ``(v, omega)``; the gain scales the
    linear speed.
    """

    name = "unicycle"

    def __init__(self, dt=0.1, gain=1.0, learn_gain=False):
        super().__init__(3, 2, dt, gain, learn_gain, position_dim=2)

    def step(self, x, u, params):
        g = self._gain(params)
        heading = x[2]
        return np.array(
            [
                x[0] + self.dt * g * u[0] * np.cos(heading),
                x[1] + self.dt * g * u[0] * np.sin(heading),
                heading + self.dt * u[1],
            ]
        )

    def jacobians(self, x, u, params):
        g = self._gain(params)
        c, s = np.cos(x[2]), np.sin(x[2])
        dt = self.dt
        fx = np.eye(3)
        fx[0, 2] = -dt * g * u[0] * s
        fx[1, 2] = dt * g * u[0] * c
        fu = np.array([[dt * g * c, 0.0], [dt * g * s, 0.0], [0.0, dt]])
        fp = np.zeros((3, self.p))
        if self.learn_gain:
            fp[:, 0] = [dt * u[0] * c, dt * u[0] * s, 0.0]
        return Jacobians(fx, fu, fp)

    def curvature(self, x, u, params, lam):
        g = self._gain(params)
        c, s = np.cos(x[2]), np.sin(x[2])
        dt = self.dt
        along = lam[0] * c + lam[1] * s
        across = -lam[0] * s + lam[1] * c
        curv = self._flat_curvature()
        curv.xx[2, 2] = -dt * g * u[0] * along
        curv.xu[2, 0] = dt * g * across
        if self.learn_gain:
            curv.xp[2, 0] = dt * u[0] * across
            curv.up[0, 0] = dt * along
        return curv


def builtin_dynamics():
    return {
        SingleIntegrator.name: SingleIntegrator,
        DoubleIntegrator.name: DoubleIntegrator,
        Unicycle.name: Unicycle,
    }


def get_dynamics(name):
    catalog = builtin_dynamics()
    key = name.replace("-", "_").lower()
    if key in ("diff_drive", "differential_drive"):
        key = Unicycle.name
    if key not in catalog:
        raise ConfigurationError('Dynamics "{}" not implemented'.format(name))
    return catalog[key]
