"""Closed-form Gaussian flow oracles and Monte Carlo geometry diagnostics."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coupling import CoupledPair, conditional_mean_oracle
from .exceptions import ConfigurationError, InputError, InsufficientDataError, NumericalError
from .inference import Trajectory, integrate, integrate_rk4

MIN_ESS = 50
MIN_BIN_COUNT = 200
DEFAULT_BANDWIDTH_SCALE = 0.3
LAMBDA_T_RANGE = (0.1, 0.9)


def _n_threads():
    try:
        return max(1, int(os.environ.get("COUPLEDFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    """Map with an optional thread pool; results keep input order."""
    items = list(items)
    n = _n_threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def draw_pairs(sampler, n, rng):
    """Call ``sampler(n, rng)`` and return ``(z0, z1)`` as 2-D arrays."""
    out = sampler(n, rng)
    if isinstance(out, CoupledPair):
        z0, z1 = out.z0, out.z1
    else:
        z0, z1 = out[0], out[1]
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    if z0.shape != z1.shape:
        raise InputError("sampler returned mismatched z0/z1")
    if z0.shape[1] == 1 and z0.shape[0] == 1 and n > 1:
        raise InputError("sampler returned a single pair")
    return z0, z1


@dataclass
class GaussianFlowSpec:
    """Jointly Gaussian endpoints ``(z0, z1)``.

    ``cov01`` is ``Cov(z0, z1)``. Use :meth:`isotropic` for the family with
    isotropic marginals and scalar cross-covariance, or :meth:`from_coupling`
    for the exact joint of a linear-Gaussian coupling.
    """

    mean0: np.ndarray
    mean1: np.ndarray
    cov00: np.ndarray
    cov11: np.ndarray
    cov01: np.ndarray

    def __post_init__(self):
        self.mean0 = np.atleast_1d(np.asarray(self.mean0, dtype=np.float64))
        self.mean1 = np.atleast_1d(np.asarray(self.mean1, dtype=np.float64))
        d = self.mean0.shape[0]
        for name in ("cov00", "cov11", "cov01"):
            m = np.asarray(getattr(self, name), dtype=np.float64).reshape(d, d)
            setattr(self, name, m)
        if self.mean1.shape != (d,):
            raise ConfigurationError("mean0 and mean1 differ in dimension")

    @classmethod
    def isotropic(cls, mu0, mu1, s0, s1, cross=0.0):
        mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
        mu1 = np.broadcast_to(np.asarray(mu1, dtype=np.float64), mu0.shape)
        if not (s0 > 0 and s1 > 0):
            raise ConfigurationError("stdevs must be positive")
        if abs(cross) > s0 * s1 * (1 + 1e-12):
            raise ConfigurationError(f"|cross| must not exceed s0*s1, got {cross}")
        eye = np.eye(mu0.shape[0])
        return cls(mu0, mu1, s0**2 * eye, s1**2 * eye, cross * eye)

    @classmethod
    def from_coupling(cls, mode, prior, degradation, sigma, source=None):
        """Exact joint for ``independent``, ``lq-anchored`` and ``oracle-anchored`` couplings."""
        d = prior.dim
        eye = np.eye(d)
        a = degradation.operator
        s11 = prior.cov
        if mode == "independent":
            if source is None:
                raise ConfigurationError("independent coupling needs a source distribution")
            return cls(source.mean, prior.mean, source.cov, s11, np.zeros((d, d)))
        lq_cov = a @ s11 @ a.T + degradation.noise_std**2 * eye
        lq_mean = a @ prior.mean
        if mode == "lq-anchored":
            gain, offset = eye, np.zeros(d)
        elif mode == "oracle-anchored":
            offset = conditional_mean_oracle(np.zeros(d), degradation, prior)
            gain = np.column_stack([conditional_mean_oracle(e, degradation, prior) - offset for e in eye])
        else:
            raise ConfigurationError(f"no closed-form joint for coupling mode {mode!r}")
        mean0 = gain @ lq_mean + offset
        cov00 = gain @ lq_cov @ gain.T + sigma**2 * eye
        cov01 = gain @ a @ s11
        return cls(mean0, prior.mean, cov00, s11, cov01)

    @classmethod
    def from_samples(cls, z0, z1):
        """Moment-matched Gaussian for an arbitrary coupling."""
        z0, z1 = np.atleast_2d(z0), np.atleast_2d(z1)
        d = z0.shape[1]
        cov = np.cov(np.hstack([z0, z1]).T)
        return cls(z0.mean(0), z1.mean(0), cov[:d, :d], cov[d:, d:], cov[:d, d:])

    @property
    def dim(self):
        return self.mean0.shape[0]

    def joint_cov(self):
        return np.block([[self.cov00, self.cov01], [self.cov01.T, self.cov11]])

    def sample(self, n, rng):
        d = self.dim
        w, v = np.linalg.eigh(self.joint_cov())
        root = v * np.sqrt(np.clip(w, 0.0, None))
        x = rng.standard_normal((n, 2 * d)) @ root.T
        return self.mean0 + x[:, :d], self.mean1 + x[:, d:]

    __call__ = sample

    def moments(self, t):
        """``(m_t, Sigma_t, Cov(u, z_t), Cov(u))`` for ``u = z1 - z0``."""
        s10 = self.cov01.T
        m_t = (1 - t) * self.mean0 + t * self.mean1
        sig_t = (1 - t) ** 2 * self.cov00 + t**2 * self.cov11 + t * (1 - t) * (self.cov01 + s10)
        c_ut = (1 - t) * s10 + t * self.cov11 - (1 - t) * self.cov00 - t * self.cov01
        s_uu = self.cov11 + self.cov00 - self.cov01 - s10
        return m_t, sig_t, c_ut, s_uu

    def _gain(self, t):
        m_t, sig_t, c_ut, s_uu = self.moments(t)
        w = np.linalg.eigvalsh(sig_t)
        if w[0] <= 1e-13 * max(w[-1], 1e-300):
            raise NumericalError(f"marginal covariance is degenerate at t={t}")
        gain = np.linalg.solve(sig_t, c_ut.T).T
        return m_t, gain, c_ut, s_uu

    def velocity(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        m_t, gain, _, _ = self._gain(t)
        return (self.mean1 - self.mean0) + (z - m_t) @ gain.T

    def conditional_cov(self, t):
        """``Cov(z1 - z0 | z_t)``, constant in ``z`` for Gaussian endpoints."""
        _, gain, c_ut, s_uu = self._gain(t)
        cov = s_uu - gain @ c_ut.T
        return 0.5 * (cov + cov.T)

    def conditional_variance(self, t):
        """Trace of the conditional velocity covariance."""
        return float(max(np.trace(self.conditional_cov(t)), 0.0))

    def marginal_std(self, t):
        return float(np.sqrt(np.trace(self.moments(t)[1]) / self.dim))

    def field(self, z, t, c=None, dt=0.0):
        """Velocity in ``field(z, t, c, dt)`` form; ``c`` and ``dt`` are ignored."""
        return self.velocity(z, t)


def gaussian_marginal_velocity(spec, z, t):
    """Exact ``E[z1 - z0 | z_t = z]``."""
    return spec.velocity(z, t)


def _local_linear(zt, u, z, bandwidth, min_ess=MIN_ESS):
    """Gaussian-kernel local-linear regression of ``u`` on ``zt`` at ``z``.

    Returns the intercept, its sandwich standard error, the weighted
    residuals, the normalised equivalent-kernel weights and the ESS.
    """
    diff = zt - z
    logw = -0.5 * np.sum(diff * diff, axis=1) / bandwidth**2
    w = np.exp(logw - logw.max()) if np.isfinite(logw.max()) else np.zeros(len(zt))
    sw = w.sum()
    if sw <= 0:
        raise InsufficientDataError(f"no samples near z={z}")
    p = w / sw
    ess = 1.0 / np.sum(p * p)
    if ess < min_ess:
        raise InsufficientDataError(f"effective sample size {ess:.1f} < {min_ess} near z={z}")
    ref = u[0]
    y = u - ref
    design = np.hstack([np.ones((len(zt), 1)), diff])
    weighted = design * p[:, None]
    gram = design.T @ weighted
    if np.linalg.matrix_rank(gram) < design.shape[1]:
        # degenerate design (e.g. a single atom): plain kernel mean
        ell = p
        fit0 = p @ y
        resid = y - fit0
    else:
        coef = np.linalg.solve(gram, weighted.T @ y)
        fit0 = coef[0]
        resid = y - design @ coef
        # equivalent-kernel weights of the intercept
        ell = np.linalg.solve(gram, weighted.T)[0]
    se = np.sqrt(np.sum((ell[:, None] * resid) ** 2, axis=0))
    return ref + fit0, se, resid, p, ess


def _default_bandwidth(zt, scale=DEFAULT_BANDWIDTH_SCALE):
    return scale * float(np.sqrt(np.mean(np.var(zt, axis=0))))


def mc_marginal_velocity(sampler, z, t, bandwidth=None, n_samples=100_000, rng=None):
    """Kernel Monte Carlo estimate of ``E[z1 - z0 | z_t ~ z]`` and its standard error.

    ``bandwidth`` defaults to 0.3 times the empirical marginal stdev of ``z_t``.
    """
    if n_samples < 10_000:
        raise InputError("mc_marginal_velocity needs at least 10^4 samples")
    rng = np.random.default_rng(rng)
    z0, z1 = draw_pairs(sampler, n_samples, rng)
    zt = (1 - t) * z0 + t * z1
    h = _default_bandwidth(zt) if bandwidth is None else bandwidth
    if not h > 0:
        raise InputError("bandwidth must be positive")
    z = np.broadcast_to(np.asarray(z, dtype=np.float64), (z0.shape[1],))
    est, se, _, _, ess = _local_linear(zt, z1 - z0, z, h)
    return est, se


def mc_marginal_velocity_grid(sampler, points, t, bandwidth=None, n_samples=100_000, rng=None):
    """As :func:`mc_marginal_velocity` for many ``points`` sharing one sample set."""
    rng = np.random.default_rng(rng)
    z0, z1 = draw_pairs(sampler, n_samples, rng)
    zt = (1 - t) * z0 + t * z1
    h = _default_bandwidth(zt) if bandwidth is None else bandwidth
    u = z1 - z0
    results = _ordered_map(lambda z: _local_linear(zt, u, np.atleast_1d(z), h)[:2], np.atleast_2d(points))
    return np.array([r[0] for r in results]), np.array([r[1] for r in results])


@dataclass
class VarianceProfile:
    """Per-bin kernel estimates of ``lambda_t(z) = E||u - v_t(z)||^2 | z_t = z``."""

    t: float
    centers: np.ndarray
    lam: np.ndarray
    count: np.ndarray
    std_error: np.ndarray
    valid: np.ndarray
    bandwidth: float

    @property
    def near_boundary(self):
        """True outside ``LAMBDA_T_RANGE``, where the variance bound is not expected to hold."""
        lo, hi = LAMBDA_T_RANGE
        return not lo <= self.t <= hi

    def bin_average(self):
        """Mean of ``lam`` over valid bins and its standard error."""
        v = self.valid
        if not v.any():
            raise InsufficientDataError("no valid bins")
        m = int(v.sum())
        return float(self.lam[v].mean()), float(np.sqrt(np.sum(self.std_error[v] ** 2)) / m)


def default_grid(z0, z1, t, points_per_axis=9, width=3.0):
    """Axis-aligned grid spanning ``+-width`` marginal stdevs of ``z_t``."""
    zt = (1 - t) * z0 + t * z1
    m, s = zt.mean(0), zt.std(0)
    axes = [np.linspace(m[i] - width * s[i], m[i] + width * s[i], points_per_axis) for i in range(zt.shape[1])]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def conditional_velocity_variance(sampler, t, z_grid=None, bandwidth=None, n_samples=100_000, rng=None,
                                  min_count=MIN_BIN_COUNT, bandwidth_scale=DEFAULT_BANDWIDTH_SCALE):
    """Local-linear kernel estimate of the conditional velocity variance on a grid.

    Bins whose effective sample size is below ``min_count`` are marked
    invalid rather than reported.
    """
    if not 0.0 < t < 1.0:
        raise InputError("t must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    z0, z1 = draw_pairs(sampler, n_samples, rng)
    zt = (1 - t) * z0 + t * z1
    u = z1 - z0
    h = _default_bandwidth(zt, bandwidth_scale) if bandwidth is None else bandwidth
    grid = default_grid(z0, z1, t) if z_grid is None else np.atleast_2d(np.asarray(z_grid, dtype=np.float64))
    if grid.shape[1] != zt.shape[1]:
        grid = grid.reshape(-1, zt.shape[1])

    def one(z):
        try:
            _, _, resid, p, ess = _local_linear(zt, u, z, h, min_ess=1.0)
        except InsufficientDataError:
            return np.nan, 0.0, np.nan
        if ess < min_count:
            return np.nan, ess, np.nan
        q = np.sum(resid * resid, axis=1)
        lam = float(p @ q)
        se = float(np.sqrt(np.sum((p * (q - lam)) ** 2)))
        return lam, ess, se

    rows = _ordered_map(one, grid)
    lam = np.array([r[0] for r in rows])
    count = np.array([r[1] for r in rows])
    se = np.array([r[2] for r in rows])
    valid = np.isfinite(lam) & (count >= min_count)
    return VarianceProfile(float(t), grid, np.where(valid, np.maximum(lam, 0.0), np.nan), count, se, valid, h)


def _trajectory_states(trajectories):
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    times = trajectories[0].times
    for tr in trajectories[1:]:
        if not np.array_equal(tr.times, times):
            raise InputError("trajectories do not share a time grid")
    if len(times) < 2:
        raise InputError("kinetic energy needs at least two time points")
    states = np.concatenate([tr.states for tr in trajectories], axis=1)
    return times, states


def kinetic_energy_samples(trajectories):
    """Per-trajectory ``int ||dZ/dt||^2 dt`` from finite differences (midpoint rule)."""
    times, states = _trajectory_states(trajectories)
    dt = np.diff(times)
    vel = np.diff(states, axis=0) / dt[:, None, None]
    return np.einsum("k,kn->n", dt, np.sum(vel * vel, axis=2))


def kinetic_energy(trajectories):
    return float(kinetic_energy_samples(trajectories).mean())


def expected_displacement(sampler, n_samples=100_000, rng=None):
    """Monte Carlo ``E||z1 - z0||^2`` with standard error."""
    if n_samples < 10_000:
        raise InputError("expected_displacement needs at least 10^4 samples")
    rng = np.random.default_rng(rng)
    z0, z1 = draw_pairs(sampler, n_samples, rng)
    sq = np.sum((z1 - z0) ** 2, axis=1)
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(len(sq)))


@dataclass
class JensenResult:
    """Kinetic energy of the flow (``lhs``) against the coupling's transport cost (``rhs``)."""

    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float

    @property
    def combined_se(self):
        return float(np.hypot(self.lhs_se, self.rhs_se))

    def holds(self, n_se=3.0, rel_slack=0.0):
        return self.lhs <= self.rhs * (1.0 + rel_slack) + n_se * self.combined_se

    def __iter__(self):
        return iter((self.lhs, self.rhs))


def jensen_gap(field, sampler, n_samples=10_000, n_steps=64, rng=None, integrator="euler", dt_mode="instantaneous"):
    """Integrate ``field`` from coupled sources and compare energy with displacement.

    The same pairs feed both sides: trajectories start at each ``z0`` with
    its conditioning anchor ``c`` (zero when the sampler provides none).
    """
    rng = np.random.default_rng(rng)
    out = sampler(n_samples, rng)
    if isinstance(out, CoupledPair):
        z0, z1, c = out.z0, out.z1, out.c
    else:
        z0, z1 = np.atleast_2d(out[0]), np.atleast_2d(out[1])
        c = np.zeros_like(z0)
    if integrator == "rk4":
        traj = integrate_rk4(field, z0, c, n_steps)
    else:
        traj = integrate(field, z0, c, n_steps, dt_mode)
    ke = kinetic_energy_samples(traj)
    disp = np.sum((z1 - z0) ** 2, axis=1)
    n = len(ke)
    return JensenResult(float(ke.mean()), float(disp.mean()), float(ke.std(ddof=1) / np.sqrt(n)),
                        float(disp.std(ddof=1) / np.sqrt(n)))


def path_crossing_count(z0, z1=None):
    """Number of discordant pairs among 1-D straight paths ``z0_i -> z1_i``.

    Accepts ``(z0, z1)`` arrays or a single ``(n, 2)`` array of pairs.
    """
    if z1 is None:
        arr = np.asarray(z0, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise InputError("expected an (n, 2) array of 1-D pairs")
        z0, z1 = arr[:, 0], arr[:, 1]
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.ndim == 2:
        if z0.shape[1] != 1:
            raise InputError("path crossings are defined for d = 1 only")
        z0 = z0[:, 0]
    if z1.ndim == 2:
        if z1.shape[1] != 1:
            raise InputError("path crossings are defined for d = 1 only")
        z1 = z1[:, 0]
    total = 0
    # row blocks keep memory bounded for large n
    for start in range(0, len(z0), 1024):
        a0, a1 = z0[start : start + 1024, None], z1[start : start + 1024, None]
        prod = (a0 - z0[None, :]) * (a1 - z1[None, :])
        total += int(np.count_nonzero(prod < 0))
    return total // 2


def crossing_ratio(z0, z1):
    n = np.asarray(z0).shape[0]
    return path_crossing_count(z0, z1) / (n * (n - 1) / 2)


def straightness(trajectory):
    """Max distance of interior states from the chord, over chord length."""
    states = trajectory.states if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=np.float64)
    if states.ndim == 3:
        if states.shape[1] != 1:
            raise InputError("straightness takes a single trajectory")
        states = states[:, 0, :]
    if len(states) < 3:
        raise InputError("straightness needs at least 3 points")
    a, b = states[0], states[-1]
    chord = b - a
    length = float(np.linalg.norm(chord))
    if length == 0.0:
        return 0.0
    rel = states[1:-1] - a
    along = rel @ chord / length
    perp = rel - np.outer(along, chord / length)
    return float(np.max(np.linalg.norm(perp, axis=1)) / length)


def _w2_squared_1d(a, b):
    a, b = np.sort(a), np.sort(b)
    if len(a) == len(b):
        return float(np.mean((a - b) ** 2))
    m = max(len(a), len(b))
    q = (np.arange(m) + 0.5) / m
    qa = np.quantile(a, q, method="inverted_cdf")
    qb = np.quantile(b, q, method="inverted_cdf")
    return float(np.mean((qa - qb) ** 2))


def random_directions(d, n_projections, rng):
    v = rng.standard_normal((n_projections, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_w2(a, b, n_projections=64, rng=None, directions=None):
    """Sliced 2-Wasserstein distance ``sqrt(mean_theta W2^2(theta.a, theta.b))``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise InputError("sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise InputError("sample sets differ in dimension")
    if directions is None:
        directions = random_directions(a.shape[1], n_projections, np.random.default_rng(rng))
    pa, pb = a @ directions.T, b @ directions.T
    w2 = [_w2_squared_1d(pa[:, k], pb[:, k]) for k in range(directions.shape[0])]
    return float(np.sqrt(np.mean(w2)))


def sliced_w2_error(a, b, n_projections=64, rng=None, n_boot=50):
    """Sliced-W2 with a bootstrap standard error over both sample sets.

    The projection directions are fixed across bootstrap replicates so the
    error reflects sampling noise in ``a`` and ``b``.
    """
    rng = np.random.default_rng(rng)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64).reshape(len(a), -1))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64).reshape(len(b), -1))
    dirs = random_directions(a.shape[1], n_projections, rng)
    value = sliced_w2(a, b, directions=dirs)
    boots = [
        sliced_w2(a[rng.integers(0, len(a), len(a))], b[rng.integers(0, len(b), len(b))], directions=dirs)
        for _ in range(n_boot)
    ]
    return value, float(np.std(boots, ddof=1))
