"""Flow-matching and shortcut self-consistency training."""

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .coupling import COUPLING_MODES
from .exceptions import ConfigurationError, InputError, TrainingError
from .numeric_core import AdamState, EmaShadow, VelocityNet, adam_step, ema_update

_OVERRUN_TOL = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    Defaults: batch 16 and lr 1e-4 (Adam) as in the reference setup, 20k
    iterations at desk scale, 3/4 of each batch on the FM objective.
    """

    batch_size: int = 16
    fm_fraction: float = 0.75
    learning_rate: float = 1e-4
    iterations: int = 20000
    ema_decay: float = 0.999
    dt_depth: int = 7
    coupling: str = "oracle-anchored"
    conditioning: bool = True
    shortcut: bool = True
    seed: int = 0
    hidden: tuple = (128, 128)
    time_features: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not 0.0 < self.fm_fraction < 1.0:
            raise ConfigurationError(f"fm_fraction must lie in (0, 1), got {self.fm_fraction}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.dt_depth < 1:
            raise ConfigurationError("dt_depth must be >= 1")
        if self.coupling not in COUPLING_MODES:
            raise ConfigurationError(f"unknown coupling mode {self.coupling!r}")
        if self.shortcut and self.batch_size < 2:
            raise ConfigurationError("shortcut training needs batch_size >= 2")

    def replace(self, **changes):
        return replace(self, **changes)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def split(self):
        """Number of FM rows and shortcut rows per batch."""
        if not self.shortcut:
            return self.batch_size, 0
        n_fm = int(round(self.fm_fraction * self.batch_size))
        n_fm = min(max(n_fm, 1), self.batch_size - 1)
        return n_fm, self.batch_size - n_fm


def interpolate(z0, z1, t):
    """Straight-line interpolant ``(1 - t) z0 + t z1``; ``t`` may be per-row."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.isfinite(t).all():
        raise InputError("interpolation time must lie in [0, 1]")
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * z1


def sample_dt(depth, rng, n=None):
    """Dyadic step size and a grid-aligned start time.

    ``dt = 2**-j`` with ``j`` uniform on ``1..depth``; ``t`` is uniform on
    ``{0, dt, 2 dt, ...}`` restricted to ``t + 2 dt <= 1``.
    """
    if depth < 1:
        raise ConfigurationError(f"dt grid depth must be >= 1, got {depth}")
    m = 1 if n is None else n
    j = rng.integers(1, depth + 1, size=m)
    dt = np.ldexp(1.0, -j)
    # 2**j - 1 admissible start points
    k = np.floor(rng.random(m) * (2.0**j - 1.0))
    t = k * dt
    if n is None:
        return float(t[0]), float(dt[0])
    return t, dt


@dataclass
class TrainBatch:
    """One assembled batch; ``is_fm`` tags rows trained with the FM loss."""

    z0: np.ndarray
    z1: np.ndarray
    c: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    is_fm: np.ndarray

    def __post_init__(self):
        fm = self.is_fm
        if np.any(self.dt[fm] != 0.0):
            raise InputError("fm-tagged rows must have dt = 0")
        sc = ~fm
        if np.any(self.dt[sc] <= 0.0) or np.any(self.t[sc] + 2.0 * self.dt[sc] > 1.0 + _OVERRUN_TOL):
            raise InputError("shortcut rows need dt > 0 and t + 2 dt <= 1")

    def subset(self, mask):
        return TrainBatch(self.z0[mask], self.z1[mask], self.c[mask], self.t[mask], self.dt[mask], self.is_fm[mask])

    @property
    def fm(self):
        return self.subset(self.is_fm)

    @property
    def shortcut(self):
        return self.subset(~self.is_fm)


def assemble_batch(pairs, config, rng):
    """Tag the first rows for FM (``dt = 0``, ``t ~ U[0, 1]``) and the rest for shortcut."""
    n_fm, n_sc = config.split()
    if len(pairs) != n_fm + n_sc:
        raise ConfigurationError(f"expected {n_fm + n_sc} pairs, got {len(pairs)}")
    t = np.empty(n_fm + n_sc)
    dt = np.zeros(n_fm + n_sc)
    t[:n_fm] = rng.random(n_fm)
    if n_sc:
        t[n_fm:], dt[n_fm:] = sample_dt(config.dt_depth, rng, n_sc)
    c = pairs.c if config.conditioning else np.zeros_like(pairs.c)
    is_fm = np.zeros(n_fm + n_sc, dtype=bool)
    is_fm[:n_fm] = True
    return TrainBatch(pairs.z0, pairs.z1, c, t, dt, is_fm)


def fm_loss_batch(net, batch):
    """Mean squared error of ``v(z_t, t, c, 0)`` against ``z1 - z0``."""
    if not np.all(batch.is_fm) or np.any(batch.dt != 0.0):
        raise InputError("fm_loss_batch received shortcut-tagged rows")
    z_t = interpolate(batch.z0, batch.z1, batch.t)
    return net.loss_and_grad(z_t, batch.t, batch.c, 0.0, batch.z1 - batch.z0)


def shortcut_target(field, z_t, t, c, dt, return_midpoint=False):
    """Average of two half-steps of ``field``.

    ``field`` is called as ``field(z, t, c, dt)`` (an EMA-parameterised net
    in training). Returns ``0.5 * (v(z_t, t) + v(z', t + dt))`` with
    ``z' = z_t + v(z_t, t) dt``.
    """
    t = np.asarray(t, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt <= 0.0):
        raise InputError("shortcut step size must be positive")
    if np.any(t + 2.0 * dt > 1.0 + _OVERRUN_TOL):
        raise InputError("shortcut interval overruns t = 1")
    col = dt[:, None] if dt.ndim == 1 and np.ndim(z_t) == 2 else dt
    v1 = field(z_t, t, c, dt)
    z_mid = z_t + v1 * col
    v2 = field(z_mid, t + dt, c, dt)
    target = 0.5 * (v1 + v2)
    return (target, z_mid) if return_midpoint else target


def ema_field(net, params):
    """``field(z, t, c, dt)`` evaluating ``net`` with frozen ``params``."""
    frozen = np.array(params, dtype=np.float64)

    def field(z, t, c, dt):
        return net.forward(z, t, c, dt, params=frozen)

    return field


def shortcut_loss_batch(net, ema_params, batch):
    """Mean squared error of ``v_theta(z_t, t, c, 2 dt)`` against the EMA target."""
    if np.any(batch.is_fm):
        raise InputError("shortcut_loss_batch received fm-tagged rows")
    z_t = interpolate(batch.z0, batch.z1, batch.t)
    target = shortcut_target(ema_field(net, ema_params), z_t, batch.t, batch.c, batch.dt)
    return net.loss_and_grad(z_t, batch.t, batch.c, 2.0 * batch.dt, target)


def combined_loss_and_grad(net, ema_params, batch):
    """``(fm_loss, sc_loss, grad)`` of ``L_FM + L_SC`` in one backward pass.

    ``sc_loss`` is ``None`` when the batch has no shortcut rows.
    """
    fm = batch.is_fm
    n_fm, n_sc = int(fm.sum()), int((~fm).sum())
    z_t = interpolate(batch.z0, batch.z1, batch.t)
    target = batch.z1 - batch.z0
    dt_in = batch.dt.copy()
    weights = np.where(fm, 1.0 / max(n_fm, 1), 1.0 / max(n_sc, 1))
    if n_sc:
        sc = ~fm
        target[sc] = shortcut_target(ema_field(net, ema_params), z_t[sc], batch.t[sc], batch.c[sc], batch.dt[sc])
        dt_in[sc] = 2.0 * batch.dt[sc]
    x = net.features(z_t, batch.t, batch.c, dt_in)
    _, grad, row = net.loss_and_grad_features(x, target, weights, return_rows=True)
    fm_loss = float(row[fm].mean()) if n_fm else 0.0
    sc_loss = float(row[~fm].mean()) if n_sc else None
    return fm_loss, sc_loss, grad


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit."""

    params: np.ndarray
    ema_params: np.ndarray
    adam: AdamState
    iteration: int = 0

    def copy(self):
        return TrainState(
            self.params.copy(),
            self.ema_params.copy(),
            replace(self.adam, m=self.adam.m.copy(), v=self.adam.v.copy()),
            self.iteration,
        )


@dataclass
class TrainResult:
    net: VelocityNet
    ema_params: np.ndarray
    state: TrainState
    log: list = field(default_factory=list)

    @property
    def ema_net(self):
        return self.net.copy(self.ema_params)


LOG_COLUMNS = ("iteration", "fm_loss", "sc_loss", "grad_norm", "wall_ms")


def _substream(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def init_state(config, dim):
    net = VelocityNet.initialize(dim, config.hidden, config.time_features, _substream(config.seed, 0))
    adam = AdamState.zeros(
        net.n_params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps
    )
    return net, TrainState(net.params.copy(), net.params.copy(), adam, 0)


def train(config, source, state=None, iterations=None, on_step=None):
    """Run the FM + shortcut loop.

    Parameters
    ----------
    config : TrainConfig
    source : callable
        ``source(n, rng) -> CoupledPair`` (e.g. a ``CouplingSampler``).
    state : TrainState, optional
        Resume from this state; iteration randomness is keyed on the
        absolute iteration index, so resuming reproduces an uninterrupted run.
    iterations : int, optional
        Stop after this absolute iteration count (defaults to ``config.iterations``).
    on_step : callable, optional
        Called with each log row.

    Returns
    -------
    TrainResult
    """
    config.validate()
    net, fresh = init_state(config, source.dim)
    if state is None:
        state = fresh
    else:
        state = state.copy()
        if state.params.shape != fresh.params.shape:
            raise ConfigurationError("resume state does not match the configured network shape")
    stop = config.iterations if iterations is None else iterations
    shadow = EmaShadow(state.ema_params, config.ema_decay)
    params, adam = state.params, state.adam
    log = []
    for it in range(state.iteration, stop):
        start = time.perf_counter()
        rng = _substream(config.seed, 1, it)
        pairs = source(config.batch_size, rng)
        batch = assemble_batch(pairs, config, rng)
        net.params = params
        fm_loss, sc_loss, grad = combined_loss_and_grad(net, shadow.params, batch)
        if not (np.isfinite(fm_loss) and (sc_loss is None or np.isfinite(sc_loss)) and np.isfinite(grad).all()):
            last_good = TrainState(params, shadow.params, adam, it)
            raise TrainingError(f"non-finite loss at iteration {it}", last_good=last_good)
        params, adam = adam_step(adam, params, grad)
        shadow = ema_update(shadow, params)
        row = (it, fm_loss, sc_loss, float(np.sqrt(grad @ grad)), (time.perf_counter() - start) * 1e3)
        log.append(row)
        if on_step is not None:
            on_step(row)
    net.params = params
    final = TrainState(params, shadow.params, adam, max(stop, state.iteration))
    return TrainResult(net, shadow.params, final, log)
