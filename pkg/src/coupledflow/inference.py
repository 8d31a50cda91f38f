"""Euler integration of learned or analytic velocity fields."""

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError, IntegrationError

_OVERRUN_TOL = 1e-12


@dataclass
class Trajectory:
    """States on an ascending time grid from 0 to 1.

    ``states`` has shape ``(n_times, n, d)``: one slice per grid time, each
    holding a batch of independent trajectories.
    """

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim == 2:
            self.states = self.states[:, None, :]
        if self.times.ndim != 1 or len(self.times) != len(self.states):
            raise InputError("one state per time point required")
        if np.any(np.diff(self.times) <= 0):
            raise InputError("trajectory times must be strictly increasing")

    @property
    def endpoint(self):
        return self.states[-1]

    def __len__(self):
        return len(self.times)


class NetField:
    """Adapter turning a ``VelocityNet`` into ``field(z, t, c, dt)``.

    With ``conditioning=False`` the conditioning channel is zeroed on every call.
    """

    def __init__(self, net, params=None, conditioning=True):
        self.net = net
        self.params = None if params is None else np.asarray(params, dtype=np.float64)
        self.conditioning = conditioning

    def __call__(self, z, t, c, dt):
        z = np.asarray(z, dtype=np.float64)
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), z.shape)
        if not self.conditioning:
            c = np.zeros_like(z)
        return self.net.forward(z, t, c, dt, params=self.params)


def euler_step(field, z, t, c, dt):
    """``z + field(z, t, c, dt) * dt``."""
    if t + dt > 1.0 + _OVERRUN_TOL:
        raise InputError(f"Euler step overruns t = 1 (t={t}, dt={dt})")
    z = np.asarray(z, dtype=np.float64)
    if dt == 0.0:
        return z.copy()
    return z + np.asarray(field(z, t, c, dt)) * dt


def integrate(field, z0, c, n_steps, dt_mode="instantaneous"):
    """Forward Euler on the uniform grid ``{0, 1/n, ..., 1}``.

    In ``instantaneous`` mode the field's step-size channel is 0; in
    ``shortcut`` mode it is ``1/n_steps``.
    """
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    if dt_mode not in ("instantaneous", "shortcut"):
        raise InputError(f"unknown dt_mode {dt_mode!r}")
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), z.shape)
    h = 1.0 / n_steps
    channel = 0.0 if dt_mode == "instantaneous" else h
    times = np.arange(n_steps + 1) * h
    states = np.empty((n_steps + 1,) + z.shape)
    states[0] = z
    for i in range(n_steps):
        z = z + np.asarray(field(z, times[i], c, channel)) * h
        if not np.isfinite(z).all():
            raise IntegrationError(f"non-finite state after step {i}", step=i)
        states[i + 1] = z
    return Trajectory(times, states)


def integrate_rk4(field, z0, c, n_steps):
    """Classical RK4 for analytic oracle fields (step-size channel fixed at 0)."""
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), z.shape)
    h = 1.0 / n_steps
    times = np.arange(n_steps + 1) * h
    states = np.empty((n_steps + 1,) + z.shape)
    states[0] = z
    for i in range(n_steps):
        t = times[i]
        k1 = field(z, t, c, 0.0)
        k2 = field(z + 0.5 * h * k1, t + 0.5 * h, c, 0.0)
        k3 = field(z + 0.5 * h * k2, t + 0.5 * h, c, 0.0)
        k4 = field(z + h * k3, t + h, c, 0.0)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(z).all():
            raise IntegrationError(f"non-finite state after step {i}", step=i)
        states[i + 1] = z
    return Trajectory(times, states)


def one_step_restore(field, lq, estimator, sigma, rng):
    """Single shortcut step from the anchored source.

    ``c = estimator(lq)``, ``z0 ~ N(c, sigma**2 I)``, returns
    ``z0 + field(z0, 0, c, 1)``.
    """
    if not sigma > 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    lq = np.asarray(lq, dtype=np.float64)
    single = lq.ndim == 1
    c = np.atleast_2d(estimator(np.atleast_2d(lq)))
    z0 = c + sigma * rng.standard_normal(c.shape)
    out = z0 + np.asarray(field(z0, 0.0, c, 1.0))
    return out[0] if single else out
