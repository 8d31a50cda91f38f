import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupledflow.exceptions import ConfigurationError, InputError
from coupledflow.numeric_core import (
    MLP,
    AdamState,
    EmaShadow,
    VelocityNet,
    adam_step,
    ema_update,
    forward,
    loss_and_grad,
    param_count,
    time_embed,
)
from gradcheck import numeric_grad, rel_error


def small_net(dim=1, hidden=(16,), k=2, seed=0):
    return VelocityNet.initialize(dim, hidden, k, np.random.default_rng(seed))


def reference_forward(net, z, t, c, dt):
    """Straight-line reimplementation: explicit loops, no shared helpers."""
    k = net.time_features
    feats = list(z)
    for s in (t, dt):
        for i in range(k // 2):
            w = np.pi * 2.0**i
            feats += [np.sin(w * s), np.cos(w * s)]
    feats += list(c)
    h = np.array(feats)
    offset = 0
    widths = net.widths
    for layer in range(len(widths) - 1):
        fi, fo = widths[layer], widths[layer + 1]
        w = net.params[offset : offset + fi * fo].reshape(fi, fo)
        offset += fi * fo
        b = net.params[offset : offset + fo]
        offset += fo
        a = np.array([sum(h[i] * w[i, j] for i in range(fi)) + b[j] for j in range(fo)])
        h = a / (1 + np.exp(-a)) if layer < len(widths) - 2 else a
    return h


class TestForward:
    def test_zero_parameters_give_zero_velocity(self):
        net = VelocityNet(2, (8, 8), 4, params=np.zeros(param_count((12, 8, 8, 2))))
        out = net.forward(np.array([0.3, -1.0]), 0.4, np.array([1.0, 2.0]), 0.25)
        assert np.array_equal(out, np.zeros(2))

    def test_matches_independent_reimplementation(self):
        net = small_net(1, (16,), 8, seed=0)
        z, c = np.array([0.5]), np.array([0.5])
        got = forward(net, z, 0.3, c, 0.0)
        assert got.shape == (1,)
        np.testing.assert_allclose(got, reference_forward(net, z, 0.3, c, 0.0), rtol=1e-13, atol=1e-14)

    def test_continuous_in_dt(self):
        net = small_net(1, (16,), 8)
        a = net.forward([0.5], 0.3, [0.5], 0.0)
        b = net.forward([0.5], 0.3, [0.5], 1e-12)
        assert np.max(np.abs(a - b)) < 1e-8

    def test_deterministic_bitwise(self):
        net = small_net(3, (32, 32), 8, seed=4)
        z = np.random.default_rng(1).standard_normal((5, 3))
        assert np.array_equal(net(z, 0.2, z, 0.125), net(z, 0.2, z, 0.125))

    def test_dimension_mismatch_is_configuration_error(self):
        net = small_net(2, (8,), 4)
        with pytest.raises(ConfigurationError):
            net.forward(np.zeros(3), 0.1, np.zeros(3), 0.0)

    def test_non_finite_input_is_input_error(self):
        net = small_net(1)
        with pytest.raises(InputError):
            net.forward([np.nan], 0.1, [0.0], 0.0)
        with pytest.raises(InputError):
            net.forward([0.0], np.inf, [0.0], 0.0)

    def test_output_length_and_param_count(self):
        net = VelocityNet(3, (7, 5), 4)
        assert net.widths == (14, 7, 5, 3)
        assert net.n_params == 14 * 7 + 7 + 7 * 5 + 5 + 5 * 3 + 3
        assert net.forward(np.zeros(3), 0.0, np.zeros(3), 0.0).shape == (3,)


GRAD_SHAPES = [
    (1, (8,), 2),
    (1, (16,), 8),
    (2, (4, 4), 2),
    (2, (16, 8), 4),
    (3, (5,), 6),
    (4, (6, 6, 6), 4),
    (1, (3, 7), 8),
]


class TestLossAndGrad:
    @pytest.mark.parametrize("dim,hidden,k", GRAD_SHAPES)
    def test_gradient_matches_finite_differences(self, dim, hidden, k):
        rng = np.random.default_rng(dim * 100 + len(hidden))
        net = VelocityNet.initialize(dim, hidden, k, rng)
        n = 3
        z, c, target = (rng.standard_normal((n, dim)) for _ in range(3))
        t, dt = rng.random(n), rng.random(n) * 0.5
        x = net.features(z, t, c, dt)
        _, grad = net.loss_and_grad_features(x, target)
        num = numeric_grad(lambda p: net.loss_and_grad_features(x, target, params=p)[0], net.params.copy())
        assert rel_error(grad, num) < 1e-4

    def test_single_element_batch(self):
        net = small_net(1, (16,), 8, seed=3)
        args = (np.array([[0.2]]), 0.4, np.array([[0.1]]), 0.0, np.array([[1.5]]))
        _, grad = loss_and_grad(net, *args)
        num = numeric_grad(lambda p: net.loss_and_grad(*args, params=p)[0], net.params.copy())
        assert rel_error(grad, num) < 1e-4

    def test_perfect_fit_gives_zero_loss_and_gradient(self):
        net = small_net(2, (8,), 4)
        z = np.random.default_rng(0).standard_normal((4, 2))
        target = net.forward(z, 0.5, z, 0.0)
        loss, grad = net.loss_and_grad(z, 0.5, z, 0.0, target)
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros(net.n_params))

    def test_duplicated_batch_is_invariant(self):
        net = small_net(2, (8,), 4)
        rng = np.random.default_rng(2)
        z, c, y = (rng.standard_normal((3, 2)) for _ in range(3))
        t = rng.random(3)
        l1, g1 = net.loss_and_grad(z, t, c, 0.0, y)
        l2, g2 = net.loss_and_grad(np.vstack([z, z]), np.r_[t, t], np.vstack([c, c]), 0.0, np.vstack([y, y]))
        assert l1 == pytest.approx(l2, rel=1e-14)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-16)

    def test_empty_batch_is_input_error(self):
        net = small_net(1)
        with pytest.raises(InputError):
            net.loss_and_grad_features(np.empty((0, net.input_width)), np.empty((0, 1)))

    def test_plain_mlp_gradient(self):
        rng = np.random.default_rng(9)
        mlp = MLP((3, 6, 2)).init_params(rng)
        x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        _, grad = mlp.loss_and_grad_features(x, y)
        num = numeric_grad(lambda p: mlp.loss_and_grad_features(x, y, params=p)[0], mlp.params.copy())
        assert rel_error(grad, num) < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params_and_decays_moments(self):
        state = AdamState(np.array([0.5, -0.2]), np.array([0.3, 0.1]), step=3)
        params = np.array([1.0, 2.0])
        new, s = adam_step(state, params, np.zeros(2))
        # m_hat is nonzero from earlier moments, so params move; check moment decay instead
        np.testing.assert_allclose(s.m, 0.9 * state.m)
        np.testing.assert_allclose(s.v, 0.999 * state.v)
        fresh = AdamState.zeros(2)
        same, _ = adam_step(fresh, params, np.zeros(2))
        assert np.array_equal(same, params)

    def test_first_step_moves_by_learning_rate(self):
        state = AdamState.zeros(1, lr=0.1)
        new, s = adam_step(state, np.array([0.0]), np.array([1.0]))
        assert new[0] == pytest.approx(-0.1, rel=1e-6)
        assert s.step == 1

    def test_sequential_steps_are_replayable(self):
        grads = np.random.default_rng(0).standard_normal((5, 4))
        runs = []
        for _ in range(2):
            state, p = AdamState.zeros(4, lr=0.01), np.zeros(4)
            for g in grads:
                p, state = adam_step(state, p, g)
            runs.append((p, state.step))
        assert np.array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == 5

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            adam_step(AdamState.zeros(3), np.zeros(3), np.zeros(2))


class TestEma:
    def test_arithmetic(self):
        assert ema_update(EmaShadow([1.0], 0.9), [0.0]).params[0] == pytest.approx(0.9)

    def test_zero_decay_copies_current(self):
        cur = np.array([0.3, -7.0])
        assert np.array_equal(ema_update(EmaShadow([1.0, 2.0], 0.0), cur).params, cur)

    def test_geometric_closed_form_and_monotone_contraction(self):
        p, s0 = 2.0, np.array([-1.0])
        shadow, dist = EmaShadow(s0, 0.99), []
        for _ in range(50):
            shadow = ema_update(shadow, [p])
            dist.append(abs(shadow.params[0] - p))
        assert shadow.params[0] == pytest.approx(p + 0.99**50 * (s0[0] - p), rel=1e-12)
        assert all(b < a for a, b in zip(dist, dist[1:]))

    @pytest.mark.parametrize("decay", [-0.1, 1.0, 1.5])
    def test_invalid_decay(self, decay):
        with pytest.raises(ConfigurationError):
            EmaShadow([0.0], decay)

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            ema_update(EmaShadow([0.0, 1.0]), [0.0])


class TestTimeEmbed:
    def test_zero_gives_alternating_pattern(self):
        np.testing.assert_array_equal(time_embed(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])

    def test_injective_on_dyadic_grid(self):
        grid = np.arange(65) / 64
        emb = time_embed(grid, 8)
        diffs = np.max(np.abs(emb[:, None, :] - emb[None, :, :]), axis=2)
        off_diag = diffs[~np.eye(65, dtype=bool)]
        assert off_diag.min() > 0

    @given(st.floats(0, 1))
    def test_deterministic(self, t):
        assert np.array_equal(time_embed(t), time_embed(t))

    @pytest.mark.parametrize("k", [0, 1, 3])
    def test_invalid_feature_count(self, k):
        with pytest.raises(ConfigurationError):
            time_embed(0.5, k)
