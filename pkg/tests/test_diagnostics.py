import numpy as np
import pytest

from coupledflow.coupling import CouplingSampler, DegradationModel, GaussianSpec, conditional_mean_oracle, degrade
from coupledflow.diagnostics import (
    GaussianFlowSpec,
    conditional_velocity_variance,
    crossing_ratio,
    expected_displacement,
    gaussian_marginal_velocity,
    jensen_gap,
    kinetic_energy,
    mc_marginal_velocity,
    mc_marginal_velocity_grid,
    path_crossing_count,
    sliced_w2,
    sliced_w2_error,
    straightness,
)
from coupledflow.exceptions import InputError, InsufficientDataError
from coupledflow.inference import NetField, Trajectory, integrate
from coupledflow.training import TrainConfig, train

PRIOR_2D = GaussianSpec([1.0, -1.0], 1.0)
MODEL_2D = DegradationModel([[0.6, 0.2], [0.0, 0.6]], 0.4)
PRIOR_1D = GaussianSpec([2.0], 1.0)
MODEL_1D = DegradationModel(0.8, 0.05)
SHIFT = GaussianFlowSpec.isotropic([0.0], [2.0], 1.0, 1.0)


def point_pair(z0, z1):
    """Sampler returning the same (z0, z1) atom for every row."""
    z0, z1 = np.atleast_1d(z0).astype(float), np.atleast_1d(z1).astype(float)
    return lambda n, rng: (np.tile(z0, (n, 1)), np.tile(z1, (n, 1)))


class TestMarginalVelocity:
    def test_symmetric_case_is_zero(self):
        spec = GaussianFlowSpec.isotropic([0.0], [0.0], 1.0, 1.0)
        np.testing.assert_allclose(gaussian_marginal_velocity(spec, np.linspace(-3, 3, 7)[:, None], 0.5), 0.0,
                                   atol=1e-15)

    def test_shift_case_is_two(self):
        assert gaussian_marginal_velocity(SHIFT, np.array([1.0]), 0.5)[0] == pytest.approx(2.0)

    def test_perfectly_correlated_is_zero(self):
        spec = GaussianFlowSpec.isotropic([0.5, 0.5], [0.5, 0.5], 1.2, 1.2, cross=1.44)
        z = np.random.default_rng(0).standard_normal((20, 2))
        for t in (0.0, 0.3, 0.7, 1.0):
            np.testing.assert_allclose(spec.velocity(z, t), 0.0, atol=1e-12)

    def test_invalid_cross_covariance(self):
        with pytest.raises(Exception):
            GaussianFlowSpec.isotropic([0.0], [0.0], 1.0, 1.0, cross=1.5)

    def test_from_coupling_matches_samples(self, rng):
        for mode in ("independent", "lq-anchored", "oracle-anchored"):
            spec = GaussianFlowSpec.from_coupling(mode, PRIOR_2D, MODEL_2D, 0.05, GaussianSpec([0.0, 0.0], 1.0))
            pair = CouplingSampler(mode, PRIOR_2D, MODEL_2D, 0.05)(200_000, rng)
            emp = GaussianFlowSpec.from_samples(pair.z0, pair.z1)
            np.testing.assert_allclose(emp.joint_cov(), spec.joint_cov(), atol=0.02)


class TestMonteCarloVelocity:
    def test_agrees_with_closed_form_on_grid(self):
        z = []
        for j, t in enumerate((0.1, 0.3, 0.5, 0.7, 0.9)):
            m, s = SHIFT.moments(t)[0][0], SHIFT.marginal_std(t)
            pts = np.linspace(m - 2 * s, m + 2 * s, 9)[:, None]
            est, se = mc_marginal_velocity_grid(SHIFT.sample, pts, t, n_samples=100_000, rng=j)
            z.append((est - SHIFT.velocity(pts, t)) / se)
        assert np.max(np.abs(np.concatenate(z))) < 3.5

    def test_single_atom_returns_displacement(self):
        est, _ = mc_marginal_velocity(point_pair([0.5, 1.0], [2.0, -1.0]), np.array([1.25, 0.0]), 0.5,
                                      bandwidth=0.3, n_samples=10_000, rng=0)
        np.testing.assert_array_equal(est, [1.5, -2.0])

    def test_standard_error_scaling(self):
        se = []
        for n in (50_000, 100_000):
            reps = [mc_marginal_velocity(SHIFT.sample, np.array([1.0]), 0.5, n_samples=n, rng=r)[1][0]
                    for r in range(3)]
            se.append(np.mean(reps))
        assert se[1] / se[0] == pytest.approx(1 / np.sqrt(2), rel=0.2)

    def test_needs_enough_samples(self):
        with pytest.raises(InputError):
            mc_marginal_velocity(SHIFT.sample, np.array([1.0]), 0.5, n_samples=1000)

    def test_low_ess_is_insufficient_data(self):
        with pytest.raises(InsufficientDataError):
            mc_marginal_velocity(SHIFT.sample, np.array([40.0]), 0.5, n_samples=10_000, rng=0)


class TestConditionalVariance:
    def test_deterministic_coupling_has_zero_variance(self):
        sampler = CouplingSampler("lq-anchored", PRIOR_2D, DegradationModel(np.eye(2), 1e-9), 1e-9)
        prof = conditional_velocity_variance(sampler, 0.5, n_samples=50_000, rng=0)
        lam, se = prof.lam[prof.valid], prof.std_error[prof.valid]
        assert prof.valid.any()
        assert np.all(lam < 3 * se + 1e-12)

    def test_independent_standard_normals(self):
        spec = GaussianFlowSpec.isotropic([0.0], [0.0], 1.0, 1.0)
        prof = conditional_velocity_variance(spec.sample, 0.5, n_samples=100_000, rng=1)
        est, se = prof.bin_average()
        assert spec.conditional_variance(0.5) == pytest.approx(2.0)
        assert abs(est - 2.0) < 3 * se + 0.02

    def test_sparse_bins_are_invalid_not_fabricated(self):
        grid = np.array([[0.0], [50.0]])
        prof = conditional_velocity_variance(SHIFT.sample, 0.5, z_grid=grid, n_samples=20_000, rng=0)
        assert prof.valid[0] and not prof.valid[1]
        assert np.isnan(prof.lam[1])
        assert np.all(prof.count[prof.valid] >= 200)

    def test_boundary_flag(self):
        inner = conditional_velocity_variance(SHIFT.sample, 0.5, n_samples=10_000, rng=0)
        edge = conditional_velocity_variance(SHIFT.sample, 0.95, n_samples=10_000, rng=0)
        assert not inner.near_boundary and edge.near_boundary

    def test_t_must_be_interior(self):
        with pytest.raises(InputError):
            conditional_velocity_variance(SHIFT.sample, 0.0)

    def test_reduced_noise_reaches_tenfold_reduction(self):
        model = DegradationModel(MODEL_2D.operator, 0.2)
        dep = CouplingSampler("oracle-anchored", PRIOR_2D, model, 0.05)
        ind = CouplingSampler("independent", PRIOR_2D, model, 0.05)
        for j, t in enumerate((0.25, 0.5, 0.75)):
            lam_dep = conditional_velocity_variance(dep, t, n_samples=100_000, rng=10 + j).bin_average()[0]
            lam_ind = conditional_velocity_variance(ind, t, n_samples=100_000, rng=20 + j).bin_average()[0]
            assert lam_dep < 0.1 * lam_ind

    def test_variance_scales_with_noise_squared(self):
        levels = np.array([0.4, 0.2, 0.1, 0.05])
        lam = []
        for j, s in enumerate(levels):
            sampler = CouplingSampler("lq-anchored", PRIOR_2D, DegradationModel(MODEL_2D.operator, s), 0.03)
            lam.append(conditional_velocity_variance(sampler, 0.5, n_samples=100_000, rng=j).bin_average()[0])
        slope = np.polyfit(np.log(levels), np.log(lam), 1)[0]
        assert abs(slope - 2.0) <= 0.3

    def test_thread_count_does_not_change_results(self, monkeypatch):
        monkeypatch.setenv("COUPLEDFLOW_THREADS", "1")
        a = conditional_velocity_variance(SHIFT.sample, 0.5, n_samples=20_000, rng=4)
        monkeypatch.setenv("COUPLEDFLOW_THREADS", "3")
        b = conditional_velocity_variance(SHIFT.sample, 0.5, n_samples=20_000, rng=4)
        assert np.array_equal(a.lam, b.lam, equal_nan=True)


class TestKineticEnergy:
    def test_straight_paths(self, rng):
        z0, z1 = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
        times = np.linspace(0, 1, 17)
        states = z0[None] + times[:, None, None] * (z1 - z0)[None]
        ke = kinetic_energy(Trajectory(times, states))
        assert abs(ke - np.mean(np.sum((z1 - z0) ** 2, 1))) < 1e-10

    def test_stationary(self):
        assert kinetic_energy(Trajectory(np.linspace(0, 1, 5), np.ones((5, 3, 2)))) == 0.0

    def test_refinement_is_stable(self, rng):
        z0 = SHIFT.sample(5000, rng)[0]
        ke = [kinetic_energy(integrate(SHIFT.field, z0, 0.0, n)) for n in (1024, 2048)]
        assert abs(ke[1] - ke[0]) / ke[1] < 0.005

    def test_single_point_is_error(self):
        with pytest.raises(InputError):
            kinetic_energy(Trajectory([0.0], np.zeros((1, 1, 1))))

    def test_mismatched_grids(self):
        a = Trajectory([0.0, 1.0], np.zeros((2, 1, 1)))
        b = Trajectory([0.0, 0.5, 1.0], np.zeros((3, 1, 1)))
        with pytest.raises(InputError):
            kinetic_energy([a, b])


class TestDisplacement:
    def test_independent_standard_normals(self):
        d = 3
        spec = GaussianFlowSpec.isotropic(np.zeros(d), np.zeros(d), 1.0, 1.0)
        est, se = expected_displacement(spec.sample, 100_000, rng=0)
        assert abs(est - 2 * d) < 3 * se

    def test_identity_coupling(self):
        assert expected_displacement(point_pair([1.0, 2.0], [1.0, 2.0]), 10_000, rng=0) == (0.0, 0.0)

    def test_anchored_decomposition(self, rng):
        sigma = 0.05
        sampler = CouplingSampler("oracle-anchored", PRIOR_2D, MODEL_2D, sigma)
        est, se = expected_displacement(sampler, 100_000, rng=1)
        z1 = PRIOR_2D.sample(100_000, rng)
        resid = np.sum((z1 - conditional_mean_oracle(degrade(z1, MODEL_2D, rng), MODEL_2D, PRIOR_2D)) ** 2, 1)
        other = resid.mean() + 2 * sigma**2
        assert abs(est - other) < 3 * np.hypot(se, resid.std(ddof=1) / np.sqrt(len(resid)))

    def test_needs_enough_samples(self):
        with pytest.raises(InputError):
            expected_displacement(SHIFT.sample, 100)


class TestJensen:
    def test_equality_for_deterministic_coupling(self):
        spec = GaussianFlowSpec.isotropic([0.0, 1.0], [2.0, -1.0], 1.0, 1.0, cross=1.0)
        res = jensen_gap(spec.field, spec.sample, 10_000, 16, rng=0)
        assert abs(res.lhs - res.rhs) < 1e-10

    def test_strict_gap_for_independent_coupling(self):
        res = jensen_gap(SHIFT.field, SHIFT.sample, 10_000, 64, rng=0, integrator="rk4")
        assert res.rhs - res.lhs > 3 * res.combined_se
        assert res.holds()

    def test_trained_net_within_slack(self):
        sampler = CouplingSampler("oracle-anchored", PRIOR_2D, MODEL_2D, 0.05)
        result = train(TrainConfig(iterations=3000, hidden=(32, 32), learning_rate=1e-3, seed=1), sampler)
        res = jensen_gap(NetField(result.net), sampler, 10_000, 64, rng=0)
        assert res.lhs <= res.rhs * 1.05


def kendall_se(n):
    """Null standard error of the discordance ratio."""
    return 0.5 * np.sqrt(2 * (2 * n + 5) / (9 * n * (n - 1)))


class TestCrossings:
    def test_single_crossing(self):
        assert path_crossing_count([0.0, 1.0], [1.0, 0.0]) == 1

    def test_monotone_coupling(self):
        assert path_crossing_count(np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]])) == 0

    def test_requires_one_dimension(self):
        with pytest.raises(InputError):
            path_crossing_count(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_independent_ratio_is_half(self, rng):
        n = 1000
        z0, z1 = rng.standard_normal(n), rng.standard_normal(n)
        assert abs(crossing_ratio(z0, z1) - 0.5) < 3 * kendall_se(n)

    def test_data_dependent_ratio_is_small(self, rng):
        pair = CouplingSampler("lq-anchored", PRIOR_1D, MODEL_1D, 0.05)(1000, rng)
        assert crossing_ratio(pair.z0[:, 0], pair.z1[:, 0]) < 0.05

    def test_ratio_falls_with_sigma(self):
        n, ratios = 1000, []
        for sigma in (0.5, 0.2, 0.08, 0.03):
            pair = CouplingSampler("lq-anchored", PRIOR_1D, MODEL_1D, sigma)(n, np.random.default_rng(7))
            ratios.append(crossing_ratio(pair.z0[:, 0], pair.z1[:, 0]))
        tol = 3 * kendall_se(n)
        assert all(b <= a + tol for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] < ratios[0]

    def test_brute_force_agreement(self, rng):
        z0, z1 = rng.standard_normal(60), rng.standard_normal(60)
        brute = sum((z0[i] - z0[j]) * (z1[i] - z1[j]) < 0 for i in range(60) for j in range(i + 1, 60))
        assert path_crossing_count(z0, z1) == brute


class TestStraightness:
    def test_straight_path(self):
        t = np.linspace(0, 1, 11)[:, None]
        assert straightness(t * np.array([[2.0, -1.0]])) == pytest.approx(0.0, abs=1e-15)

    def test_semicircle(self):
        theta = np.linspace(np.pi, 0, 257)
        arc = np.column_stack([0.5 * np.cos(theta), 0.5 * np.sin(theta)])
        assert straightness(arc) == pytest.approx(0.5, abs=1e-4)

    def test_rotation_invariance(self, rng):
        path = np.cumsum(rng.standard_normal((20, 2)), axis=0)
        a = 0.7
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        assert straightness(path @ rot.T) == pytest.approx(straightness(path), rel=1e-12)

    def test_zero_chord(self):
        assert straightness(np.array([[0.0], [1.0], [0.0]])) == 0.0

    def test_too_short(self):
        with pytest.raises(InputError):
            straightness(np.zeros((2, 1)))


class TestSlicedW2:
    def test_identical_sets(self, rng):
        a = rng.standard_normal((500, 3))
        assert sliced_w2(a, a, 16, rng=0) == 0.0

    def test_point_masses(self):
        assert sliced_w2(np.zeros((10, 1)), np.full((10, 1), 3.0), 8, rng=0) == pytest.approx(3.0)

    def test_shifted_gaussians(self, rng):
        a = rng.standard_normal((10_000, 1))
        b = 2.0 + rng.standard_normal((10_000, 1))
        assert sliced_w2(a, b, 64, rng=0) == pytest.approx(2.0, rel=0.05)

    def test_symmetric(self, rng):
        a, b = rng.standard_normal((300, 2)), rng.standard_normal((400, 2)) + 1
        assert sliced_w2(a, b, 32, rng=5) == pytest.approx(sliced_w2(b, a, 32, rng=5), rel=1e-12)

    def test_bootstrap_error(self, rng):
        a, b = rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2))
        value, se = sliced_w2_error(a, b, 32, rng=0)
        assert se > 0 and value < 5 * se + 0.05
