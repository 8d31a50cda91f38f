"""Source/target distributions, degradation, couplings and the conditional-mean anchor.

All samplers accept either a single latent ``(d,)`` or a batch ``(n, d)``
and take an explicit :class:`numpy.random.Generator`.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigurationError, InputError, NumericalError, TrainingError
from .numeric_core import MLP, AdamState, EmaShadow, adam_step, ema_update

COUPLING_MODES = ("independent", "lq-anchored", "oracle-anchored", "learned-anchored")
DEFAULT_SIGMA = 0.05


@dataclass(frozen=True)
class GaussianSpec:
    """Isotropic Gaussian ``N(mean, std**2 I)``."""

    mean: np.ndarray
    std: float

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if mean.ndim != 1 or not np.isfinite(mean).all():
            raise ConfigurationError(f"mean must be a finite vector, got {self.mean!r}")
        if not (np.isfinite(self.std) and self.std > 0):
            raise ConfigurationError(f"std must be positive, got {self.std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", float(self.std))

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def cov(self):
        return self.std**2 * np.eye(self.dim)

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class DegradationModel:
    """Linear-Gaussian degradation ``lq = A z1 + eta``, ``eta ~ N(0, noise_std**2 I)``."""

    operator: np.ndarray
    noise_std: float

    def __post_init__(self):
        op = np.asarray(self.operator, dtype=np.float64)
        if op.ndim == 0:
            op = op.reshape(1, 1)
        if op.ndim != 2 or op.shape[0] != op.shape[1]:
            raise ConfigurationError(f"operator must be square, got shape {op.shape}")
        if not np.isfinite(op).all():
            raise ConfigurationError("operator has non-finite entries")
        if not (np.isfinite(self.noise_std) and self.noise_std > 0):
            raise ConfigurationError(f"noise_std must be positive, got {self.noise_std}")
        object.__setattr__(self, "operator", op)
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @property
    def dim(self):
        return self.operator.shape[0]


class LatentCodec:
    """Identity encoder/decoder standing in for a learned autoencoder."""

    mode = "identity"

    def encode(self, x):
        return np.asarray(x, dtype=np.float64)

    def decode(self, z):
        return np.asarray(z, dtype=np.float64)


@dataclass
class CoupledPair:
    """Batch of coupled samples; each field is ``(n, d)``.

    ``c`` is the anchor the source was drawn around (and the conditioning
    signal); ``lq`` is the raw degraded observation.
    """

    z0: np.ndarray
    z1: np.ndarray
    c: np.ndarray
    lq: np.ndarray

    def __len__(self):
        return self.z0.shape[0]

    def take(self, idx):
        return CoupledPair(self.z0[idx], self.z1[idx], self.c[idx], self.lq[idx])


def _as_batch(x, dim=None, name="input"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2:
        raise InputError(f"{name} must be a vector or a 2-D batch, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ConfigurationError(f"{name} has dimension {x.shape[1]}, expected {dim}")
    return x, single


def _restore(x, single):
    return x[0] if single else x


def degrade(z1, model, rng):
    """``A z1 + eta`` with fresh Gaussian noise."""
    z1, single = _as_batch(z1, model.dim, "z1")
    noise = model.noise_std * rng.standard_normal(z1.shape)
    return _restore(z1 @ model.operator.T + noise, single)


def sample_independent_pair(rho0, rho1, rng, n=None):
    """Draw ``z0 ~ rho0`` and ``z1 ~ rho1`` from two spawned substreams."""
    if rho0.dim != rho1.dim:
        raise ConfigurationError(f"source dim {rho0.dim} != target dim {rho1.dim}")
    rng0, rng1 = rng.spawn(2)
    m = 1 if n is None else n
    z0, z1 = rho0.sample(m, rng0), rho1.sample(m, rng1)
    if n is None:
        return z0[0], z1[0]
    return z0, z1


def anchored_source(c, sigma, rng):
    """Draw from ``N(c, sigma**2 I)``."""
    if not sigma > 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    c = np.asarray(c, dtype=np.float64)
    return c + sigma * rng.standard_normal(c.shape)


def conditional_mean_oracle(lq, model, prior):
    """Exact posterior mean ``E[z1 | lq]`` for ``z1 ~ prior``, ``lq = A z1 + eta``.

    Solves the normal equations
    ``(I/s^2 + A^T A / s_eta^2) m = mu/s^2 + A^T lq / s_eta^2``.
    """
    if model.dim != prior.dim:
        raise ConfigurationError(f"degradation dim {model.dim} != prior dim {prior.dim}")
    lq, single = _as_batch(lq, model.dim, "lq")
    a = model.operator
    prec_prior = 1.0 / prior.std**2
    prec_noise = 1.0 / model.noise_std**2
    normal = prec_prior * np.eye(model.dim) + prec_noise * (a.T @ a)
    if not np.isfinite(normal).all() or np.linalg.cond(normal) > 1e14:
        raise NumericalError("normal-equations matrix is singular or ill-conditioned")
    rhs = prec_prior * prior.mean[None, :] + prec_noise * (lq @ a)
    post = np.linalg.solve(normal, rhs.T).T
    return _restore(post, single)


def posterior_covariance(model, prior):
    """Covariance of ``z1 | lq`` under the linear-Gaussian model."""
    a = model.operator
    normal = np.eye(model.dim) / prior.std**2 + (a.T @ a) / model.noise_std**2
    return np.linalg.inv(normal)


class ConditionalMeanEstimator(RegressorMixin, BaseEstimator):
    """Regressor for ``E[z1 | lq]`` used as source anchor and conditioning signal.

    ``mode="oracle"`` returns the exact linear-Gaussian posterior mean and
    needs ``degradation`` and ``prior``; ``fit`` then only validates input.
    ``mode="learned"`` trains a small MLP with squared loss and Adam.

    Parameters
    ----------
    mode : {"oracle", "learned"}
    degradation : DegradationModel, optional
    prior : GaussianSpec, optional
    hidden : tuple of int
        Hidden widths of the learned regressor.
    max_iter : int
        Adam iterations.
    batch_size : int
    learning_rate : float
    validation_fraction : float
        Fraction held out to report ``heldout_mse_``.
    averaging_decay : float
        EMA decay for averaging Adam iterates; 0 keeps the last iterate.
    random_state : int or None
    """

    def __init__(
        self,
        mode="learned",
        degradation=None,
        prior=None,
        hidden=(32, 32),
        max_iter=8000,
        batch_size=256,
        learning_rate=3e-4,
        validation_fraction=0.1,
        averaging_decay=0.999,
        random_state=0,
    ):
        self.mode = mode
        self.degradation = degradation
        self.prior = prior
        self.hidden = hidden
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.averaging_decay = averaging_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        y = y.reshape(len(y), -1)
        if y.shape[1] != X.shape[1]:
            raise ConfigurationError(f"lq dim {X.shape[1]} != target dim {y.shape[1]}")
        self.n_features_in_ = X.shape[1]
        if self.mode == "oracle":
            if self.degradation is None or self.prior is None:
                raise ConfigurationError("oracle mode needs a degradation model and a prior")
            if self.degradation.dim != X.shape[1]:
                raise ConfigurationError("degradation dim does not match data")
            self.heldout_mse_ = float(np.mean((conditional_mean_oracle(X, self.degradation, self.prior) - y) ** 2))
            self.is_fitted_ = True
            return self
        if self.mode != "learned":
            raise ConfigurationError(f"unknown estimator mode {self.mode!r}")
        if X.shape[0] < 100 * X.shape[1]:
            raise InputError(f"need at least {100 * X.shape[1]} samples, got {X.shape[0]}")
        self._fit_learned(X, y)
        self.is_fitted_ = True
        return self

    def _fit_learned(self, X, y):
        rng = np.random.default_rng(self.random_state)
        n = X.shape[0]
        perm = rng.permutation(n)
        n_val = max(1, int(round(self.validation_fraction * n)))
        val, tr = perm[:n_val], perm[n_val:]
        x_mean, x_std = X[tr].mean(axis=0), X[tr].std(axis=0) + 1e-12
        y_mean, y_std = y[tr].mean(axis=0), y[tr].std(axis=0) + 1e-12
        xs, ys = (X - x_mean) / x_std, (y - y_mean) / y_std

        net = MLP((X.shape[1], *self.hidden, y.shape[1])).init_params(rng)
        state = AdamState.zeros(net.n_params, lr=self.learning_rate)
        params = net.params
        # iterate averaging damps the SGD noise floor of the final fit
        shadow = EmaShadow(params, self.averaging_decay)
        batch = min(self.batch_size, len(tr))
        self.loss_curve_ = []
        for it in range(self.max_iter):
            idx = tr[rng.integers(0, len(tr), size=batch)]
            loss, grad = net.loss_and_grad_features(xs[idx], ys[idx], params=params)
            if not np.isfinite(loss):
                raise TrainingError(f"conditional-mean regression diverged at iteration {it} (loss={loss})")
            params, state = adam_step(state, params, grad)
            shadow = ema_update(shadow, params)
            self.loss_curve_.append(loss)
        net.params = shadow.params if self.averaging_decay else params

        self.net_ = net
        self.scaling_ = (x_mean, x_std, y_mean, y_std)
        self.heldout_mse_ = float(np.mean((self._predict_learned(X[val]) - y[val]) ** 2))

    def _predict_learned(self, X):
        x_mean, x_std, y_mean, y_std = self.scaling_
        return self.net_.forward_features((X - x_mean) / x_std) * y_std + y_mean

    def predict(self, X):
        check_is_fitted(self, "is_fitted_")
        X, single = _as_batch(X, self.n_features_in_, "lq")
        X = check_array(X, dtype=np.float64)
        if self.mode == "oracle":
            out = conditional_mean_oracle(X, self.degradation, self.prior)
        else:
            out = self._predict_learned(X)
        return _restore(out, single)

    __call__ = predict


def fit_conditional_mean(lq, z1, **params):
    """Train a learned-mode :class:`ConditionalMeanEstimator` on ``(lq, z1)`` pairs."""
    return ConditionalMeanEstimator(mode="learned", **params).fit(lq, z1)


def sample_coupled_pair(z1, model, estimator, sigma, codec, rng):
    """Data-dependent coupling around a degraded observation of ``z1``.

    Without an estimator the anchor is ``encode(lq)``; with one it is
    ``estimator(lq)``. The source is ``anchor + eps``, ``eps ~ N(0, sigma**2 I)``.
    """
    if not sigma > 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    z1, single = _as_batch(z1, model.dim, "z1")
    lq = degrade(z1, model, rng)
    anchor = codec.encode(lq) if estimator is None else np.atleast_2d(estimator(lq))
    if anchor.shape != z1.shape:
        raise ConfigurationError(f"estimator output shape {anchor.shape} != {z1.shape}")
    z0 = anchored_source(anchor, sigma, rng)
    pair = CoupledPair(z0, z1, anchor, lq)
    return pair.take(0) if single else pair


class CouplingSampler:
    """Infinite source of coupled batches for one coupling mode.

    Targets come from ``prior`` unless a fixed dataset ``(lq, z1)`` is given,
    in which case rows are resampled and only the source noise is fresh.
    In ``independent`` mode ``z0 ~ source`` and the conditioning anchor is 0.

    Parameters
    ----------
    mode : str
        One of ``COUPLING_MODES``.
    prior : GaussianSpec
        Target distribution ``rho_1``.
    degradation : DegradationModel
    sigma : float
        Source spread around the anchor.
    source : GaussianSpec, optional
        ``rho_0`` for independent coupling; ``N(0, I)`` by default.
    estimator : callable, optional
        ``lq -> anchor``; required for the learned/oracle modes unless it can
        be built from ``prior`` and ``degradation`` (oracle).
    dataset : tuple of arrays, optional
    """

    def __init__(self, mode, prior, degradation, sigma=DEFAULT_SIGMA, source=None, estimator=None,
                 dataset=None, codec=None):
        if mode not in COUPLING_MODES:
            raise ConfigurationError(f"unknown coupling mode {mode!r}; expected one of {COUPLING_MODES}")
        if prior.dim != degradation.dim:
            raise ConfigurationError("prior and degradation dimensions differ")
        self.mode = mode
        self.prior = prior
        self.degradation = degradation
        self.sigma = float(sigma)
        self.source = source if source is not None else GaussianSpec(np.zeros(prior.dim), 1.0)
        self.codec = codec or LatentCodec()
        if mode == "oracle-anchored" and estimator is None:
            estimator = ConditionalMeanEstimator("oracle", degradation, prior).fit(
                np.zeros((1, prior.dim)), np.zeros((1, prior.dim))
            )
        if mode == "learned-anchored" and estimator is None:
            raise ConfigurationError("learned-anchored coupling needs a fitted estimator")
        self.estimator = estimator
        if dataset is not None:
            lq, z1 = (np.asarray(a, dtype=np.float64) for a in dataset)
            if lq.shape != z1.shape or lq.ndim != 2 or lq.shape[1] != prior.dim:
                raise ConfigurationError("dataset arrays must both be (n, d)")
            dataset = (lq, z1)
        self.dataset = dataset

    @property
    def dim(self):
        return self.prior.dim

    def anchor(self, lq):
        if self.mode == "independent":
            return np.zeros_like(lq)
        if self.mode == "lq-anchored":
            return self.codec.encode(lq)
        return np.atleast_2d(self.estimator(lq))

    def draw(self, n, rng):
        if self.dataset is not None:
            idx = rng.integers(0, self.dataset[0].shape[0], size=n)
            lq, z1 = self.dataset[0][idx], self.dataset[1][idx]
        else:
            z1 = self.prior.sample(n, rng)
            lq = degrade(z1, self.degradation, rng)
        c = self.anchor(lq)
        if self.mode == "independent":
            z0 = self.source.sample(n, rng)
        else:
            z0 = anchored_source(c, self.sigma, rng)
        return CoupledPair(z0, z1, c, lq)

    __call__ = draw
