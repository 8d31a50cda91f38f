"""Dense MLP with hand-written backprop, Adam and EMA parameter tracking.

Everything runs in float64. Parameters live in one flat array; the layer
weights are views into it, so the optimiser, the EMA shadow and the
checkpoint code all work on plain 1-D arrays.
"""

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigurationError, InputError

DEFAULT_HIDDEN = (128, 128)
DEFAULT_TIME_FEATURES = 8


def time_embed(t, k=DEFAULT_TIME_FEATURES):
    """Sinusoidal features of ``t`` at frequencies ``pi * 2**i``.

    Returns an array of shape ``t.shape + (k,)`` laid out as
    ``[sin(w0 t), cos(w0 t), sin(w1 t), cos(w1 t), ...]``. The lowest
    frequency is ``pi`` so the first pair alone is injective on [0, 1].
    """
    if k < 2 or k % 2:
        raise ConfigurationError(f"time feature count must be even and >= 2, got {k}")
    t = np.asarray(t, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(k // 2)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (k,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def layer_shapes(widths):
    return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]


def param_count(widths):
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in layer_shapes(widths))


class MLP:
    """Fully connected net with SiLU hidden layers and an affine output.

    ``params`` is a flat float64 array of length ``param_count(widths)``;
    weight matrices are stored row-major as ``(fan_in, fan_out)``.
    """

    def __init__(self, widths, params=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigurationError(f"invalid layer widths {widths}")
        self.widths = widths
        self.n_params = param_count(widths)
        self._slices = []
        offset = 0
        for fan_in, fan_out in layer_shapes(widths):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b, fan_in, fan_out))
        if params is None:
            params = np.zeros(self.n_params)
        self.params = self._check_params(params)

    def _check_params(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ConfigurationError(
                f"expected {self.n_params} parameters for widths {self.widths}, got shape {params.shape}"
            )
        return params

    def init_params(self, rng=None):
        """Glorot-uniform weights, zero biases. Overwrites ``self.params``."""
        rng = np.random.default_rng(rng)
        for w, _, fan_in, fan_out in self._slices:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        return self

    @property
    def input_width(self):
        return self.widths[0]

    @property
    def output_width(self):
        return self.widths[-1]

    def layers(self, params=None):
        p = self.params if params is None else params
        return [(p[w].reshape(fan_in, fan_out), p[b]) for w, b, fan_in, fan_out in self._slices]

    def forward_features(self, x, params=None):
        h = x
        layers = self.layers(params)
        for w, b in layers[:-1]:
            h, _ = _silu(h @ w + b)
        w, b = layers[-1]
        return h @ w + b

    def loss_and_grad_features(self, x, target, weights=None, params=None, return_rows=False):
        """Weighted mean-squared error and its exact parameter gradient.

        The loss is ``sum_i w_i * mean_j (out_ij - target_ij)**2`` with
        ``w_i = 1/n`` by default, i.e. the mean over batch and dimensions.
        With ``return_rows`` the per-row ``mean_j`` squared errors are
        returned as a third element.
        """
        x = np.asarray(x, dtype=np.float64)
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        n = x.shape[0]
        if n == 0:
            raise InputError("empty batch")
        d = self.output_width
        if target.shape != (n, d):
            raise ConfigurationError(f"target shape {target.shape} does not match ({n}, {d})")
        if weights is None:
            weights = np.full(n, 1.0 / n)
        layers = self.layers(params)

        acts = [x]
        gates = []
        h = x
        for w, b in layers[:-1]:
            a = h @ w + b
            h, s = _silu(a)
            gates.append((a, s))
            acts.append(h)
        w_out, b_out = layers[-1]
        out = h @ w_out + b_out

        resid = out - target
        rows = np.einsum("ij,ij->i", resid, resid) / d
        loss = float(weights @ rows)
        delta = (2.0 / d) * weights[:, None] * resid

        grad = np.empty(self.n_params)
        for idx in range(len(layers) - 1, -1, -1):
            wsl, bsl, _, _ = self._slices[idx]
            grad[wsl] = (acts[idx].T @ delta).ravel()
            grad[bsl] = delta.sum(axis=0)
            if idx == 0:
                break
            dh = delta @ layers[idx][0].T
            a, s = gates[idx - 1]
            delta = dh * (s * (1.0 + a * (1.0 - s)))
        if return_rows:
            return loss, grad, rows
        return loss, grad


class VelocityNet(MLP):
    """Velocity field ``(z, t, c, dt) -> v``.

    The input row is ``[z (d), embed(t) (k), embed(dt) (k), c (d)]``.

    Parameters
    ----------
    dim : int
        Latent dimension ``d``.
    hidden : sequence of int
        Hidden layer widths.
    time_features : int
        Number of sinusoidal features ``k`` per time channel.
    params : ndarray, optional
        Flat parameter vector; zeros when omitted.
    """

    def __init__(self, dim, hidden=DEFAULT_HIDDEN, time_features=DEFAULT_TIME_FEATURES, params=None):
        if dim < 1:
            raise ConfigurationError(f"dim must be positive, got {dim}")
        time_embed(0.0, time_features)  # validates k
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_features = int(time_features)
        super().__init__((2 * self.dim + 2 * self.time_features, *self.hidden, self.dim), params)

    @classmethod
    def initialize(cls, dim, hidden=DEFAULT_HIDDEN, time_features=DEFAULT_TIME_FEATURES, rng=None):
        return cls(dim, hidden, time_features).init_params(rng)

    @classmethod
    def from_widths(cls, widths, params=None):
        """Rebuild a net from its full width tuple (as stored in checkpoints)."""
        widths = tuple(int(w) for w in widths)
        dim = widths[-1]
        k2 = widths[0] - 2 * dim
        if k2 < 2 or k2 % 4:
            raise ConfigurationError(f"widths {widths} do not describe a velocity net")
        return cls(dim, widths[1:-1], k2 // 2, params)

    def copy(self, params=None):
        return VelocityNet(
            self.dim,
            self.hidden,
            self.time_features,
            params=np.array(self.params if params is None else params, dtype=np.float64),
        )

    def features(self, z, t, c, dt):
        """Assemble the input matrix for a batch.

        ``z`` and ``c`` are ``(n, d)`` (or ``(d,)``); ``t`` and ``dt`` are
        scalars or length-``n`` arrays.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        if z.shape[1] != self.dim or c.shape[1] != self.dim:
            raise ConfigurationError(
                f"net expects latent dim {self.dim}, got z {z.shape[1]} and c {c.shape[1]}"
            )
        n = z.shape[0]
        if c.shape[0] == 1 and n > 1:
            c = np.broadcast_to(c, z.shape)
        elif c.shape[0] != n:
            raise ConfigurationError(f"batch mismatch: z has {n} rows, c has {c.shape[0]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (n,))
        if not (np.isfinite(z).all() and np.isfinite(c).all() and np.isfinite(t).all() and np.isfinite(dt).all()):
            raise InputError("non-finite network input")
        k = self.time_features
        x = np.empty((n, self.input_width))
        x[:, : self.dim] = z
        x[:, self.dim : self.dim + k] = time_embed(t, k)
        x[:, self.dim + k : self.dim + 2 * k] = time_embed(dt, k)
        x[:, self.dim + 2 * k :] = c
        return x

    def forward(self, z, t, c, dt, params=None):
        """Predicted velocity; returns ``(d,)`` for a single vector input."""
        single = np.ndim(z) == 1
        out = self.forward_features(self.features(z, t, c, dt), params)
        return out[0] if single else out

    __call__ = forward

    def loss_and_grad(self, z, t, c, dt, target, weights=None, params=None):
        return self.loss_and_grad_features(self.features(z, t, c, dt), target, weights, params)


def forward(net, z, t, c, dt):
    return net.forward(z, t, c, dt)


def loss_and_grad(net, z, t, c, dt, target):
    return net.loss_and_grad(z, t, c, dt, target)


@dataclass
class AdamState:
    """Adam moments and hyperparameters; defaults follow the training setup (lr 1e-4)."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params, **hyper):
        return cls(np.zeros(n_params), np.zeros(n_params), **hyper)


def adam_step(state, params, grad):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise ConfigurationError(
            f"length mismatch: params {params.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


@dataclass
class EmaShadow:
    params: np.ndarray
    decay: float = 0.999

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        if not 0.0 <= self.decay < 1.0:
            raise ConfigurationError(f"EMA decay must lie in [0, 1), got {self.decay}")


def ema_update(shadow, current):
    current = np.asarray(current, dtype=np.float64)
    if current.shape != shadow.params.shape:
        raise ConfigurationError(
            f"EMA length mismatch: shadow {shadow.params.shape}, current {current.shape}"
        )
    if not 0.0 <= shadow.decay < 1.0:
        raise ConfigurationError(f"EMA decay must lie in [0, 1), got {shadow.decay}")
    return EmaShadow(shadow.decay * shadow.params + (1.0 - shadow.decay) * current, shadow.decay)
