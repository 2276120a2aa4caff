import numpy as np
import pytest

from gtfrnn import (ContractError, GtfState, ObservationModel,
                    alpha_from_geomean, alpha_from_max_data_jacobian,
                    alpha_from_norm_bound, anneal_update, force_state,
                    jacobian_product_norm_series, jacobians_at, spectral_norm)
from gtfrnn.gtf import (geometric_mean_norm, jacobian_spectrum_stats,
                        commutator_diagnostic, sparse_tf_schedule)
from conftest import rand_params, linear_params


class TestSpectralNorm:
    def test_matches_svd(self):
        rng = np.random.default_rng(0)
        for shape in [(3, 3), (5, 2), (2, 8)]:
            A = rng.standard_normal(shape)
            assert spectral_norm(A) == pytest.approx(
                np.linalg.svd(A, compute_uv=False)[0], rel=1e-7)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0


class TestForceState:
    def test_interpolation(self):
        z = np.array([1.0, 2.0])
        zb = np.array([3.0, 6.0])
        np.testing.assert_allclose(force_state(z, zb, 0.25), [1.5, 3.0])
        np.testing.assert_allclose(force_state(z, zb, 0.0), z)
        np.testing.assert_allclose(force_state(z, zb, 1.0), zb)

    def test_domain_checks(self):
        with pytest.raises(ContractError):
            force_state(np.ones(2), np.ones(3), 0.5)
        with pytest.raises(ContractError):
            force_state(np.ones(2), np.ones(2), 1.5)


def test_sparse_schedule():
    forced = [t for t in range(10) if sparse_tf_schedule(3, t)]
    assert forced == [0, 3, 6, 9]


class TestAlphaEstimators:
    def test_norm_bound_linear(self):
        # disconnected hidden layer: bound is max |A_i|
        assert alpha_from_norm_bound(linear_params(2.0)) == pytest.approx(0.5)
        assert alpha_from_norm_bound(linear_params(0.8)) == 0.0

    def test_max_data_jacobian_constant(self):
        J = np.tile(np.diag([2.0, 0.5]), (6, 1, 1))
        assert alpha_from_max_data_jacobian(J) == pytest.approx(0.5)
        assert alpha_from_max_data_jacobian(0.5 * np.eye(2)[None]) == 0.0

    def test_geomean_commuting_diagonals(self):
        # diagonal Jacobians commute: explog gives the exact geometric mean
        d = np.array([1.0, 2.0, 4.0])
        J = np.stack([np.diag([v, 0.1]) for v in d])
        kappa = geometric_mean_norm(J, method="explog")[0]
        assert kappa == pytest.approx(2.0, rel=1e-8)   # (1*2*4)^(1/3)
        kappa_n = geometric_mean_norm(J, method="norm_bound")[0]
        assert kappa_n == pytest.approx(2.0, rel=1e-10)
        kappa_a = geometric_mean_norm(J, method="arithmetic")[0]
        assert kappa_a == pytest.approx(7.0 / 3.0, rel=1e-8)

    def test_explog_fallback_on_negative_axis(self, caplog):
        J = np.stack([-np.eye(2), 2 * np.eye(2)])
        with caplog.at_level("WARNING"):
            kappa = geometric_mean_norm(J, method="explog")[0]
        assert "falling back" in caplog.text
        assert kappa == pytest.approx(
            geometric_mean_norm(J, method="arithmetic")[0])

    def test_alpha_from_geomean(self):
        J = np.tile(4.0 * np.eye(2), (5, 1, 1))
        assert alpha_from_geomean(J) == pytest.approx(0.75)
        J = np.tile(0.5 * np.eye(2), (5, 1, 1))
        assert alpha_from_geomean(J) == 0.0


class TestAnnealing:
    def test_gating_and_ema(self):
        state = GtfState(alpha=1.0, mode="adaptive", gamma=0.9,
                         update_interval=3)
        J = np.tile(2.0 * np.eye(2), (4, 1, 1))[None]   # estimate 0.5
        s1 = anneal_update(state, None)
        s2 = anneal_update(s1, None)
        assert s1.alpha == s2.alpha == 1.0      # gated off
        s3 = anneal_update(s2, J)               # third call updates
        assert s3.step_count == 3
        assert s3.alpha == pytest.approx(0.1 * 0.5 + 0.9 * 1.0)

    def test_jump_up(self):
        state = GtfState(alpha=0.1, mode="adaptive", update_interval=1)
        J = np.tile(10.0 * np.eye(2), (4, 1, 1))[None]  # estimate 0.9
        assert anneal_update(state, J).alpha == pytest.approx(0.9)

    def test_requires_adaptive(self):
        with pytest.raises(ContractError):
            anneal_update(GtfState(alpha=0.5, mode="fixed"), None)


class TestProductNormSeries:
    def test_constant_jacobian_geometric(self, identity_obs):
        # z' = 2z: sigma = 2 exactly at every state
        p = linear_params(2.0)
        data = np.zeros((50, 1))
        obs = identity_obs(1)
        for alpha, rate in [(0.5, 1.0), (0.0, 2.0), (0.9, 0.2)]:
            series = jacobian_product_norm_series(p, obs, data, alpha, 30)
            expected = np.arange(1, 31) * np.log10(rate)
            np.testing.assert_allclose(series, expected, atol=1e-9)

    def test_log_domain_no_overflow(self, identity_obs):
        p = linear_params(10.0)
        series = jacobian_product_norm_series(
            p, identity_obs(1), np.zeros((10, 1)), 0.0, 500)
        assert np.all(np.isfinite(series))
        assert series[-1] == pytest.approx(500.0)


def test_spectrum_stats():
    J = np.stack([np.diag([3.0, 0.5]), np.diag([1.0, 0.25])])
    stats = jacobian_spectrum_stats(J)
    assert stats.sigma_max_tilde == pytest.approx(3.0)
    assert stats.lambda_min_tilde == pytest.approx(0.25)
    assert stats.gamma_tilde == pytest.approx(0.25 / 3.0)


def test_commutator_diagnostic_range():
    p = rand_params(3, 6, seed=2)
    Z = np.random.default_rng(0).standard_normal((20, 3))
    J = jacobians_at(p, Z)
    ratios = commutator_diagnostic(J)
    assert np.all(ratios >= 0)
    assert np.all(ratios <= 1.0 + 1e-12)
    # commuting family -> exactly zero
    D = np.stack([np.diag([1.0, 2.0]), np.diag([3.0, 4.0])])
    assert np.max(commutator_diagnostic(D)) == 0.0
