"""Tests for the inelastic Povzner kernel and gamma_p."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.kernel_service.povzner import (
    a_plus_moment,
    a_plus_via_omega,
    discrete_collision_moment,
    g_bar,
    gamma_closed_form,
    gamma_p,
    kernel_eval,
    lambda_of_mu,
)
from backend.kernel_service.quadrature import orthonormal_frame, sphere_average
from backend.shared.exceptions import DomainError
from backend.shared.models import RestitutionParams

ORDERS = [float(p) for p in np.arange(1.0, 20.25, 0.5)]


class TestKernel:
    @pytest.mark.parametrize(
        "beta, mu, expected",
        [(1.0, 0.3, 1.0), (0.8, 1.0, 1.0), (0.6, 1.0, 1.0), (0.5, 0.6, 0.6)],
    )
    def test_lambda_values(self, beta, mu, expected):
        params = RestitutionParams.from_beta(beta)
        assert lambda_of_mu(params, mu) == pytest.approx(expected, abs=1e-14)

    def test_lambda_range(self):
        params = RestitutionParams.from_beta(0.7)
        values = lambda_of_mu(params, np.linspace(-1.0, 1.0, 201))
        assert np.all(values >= 2 * 0.7 - 1 - 1e-14)
        assert np.all(values <= 1.0 + 1e-14)

    def test_g_bar_elastic_is_one(self):
        params = RestitutionParams(e=1.0)
        assert np.allclose(g_bar(params, np.linspace(-1, 1, 11)), 1.0)

    def test_g_bar_maximum(self):
        params = RestitutionParams.from_beta(0.75)
        assert g_bar(params, 1.0) == pytest.approx(10.0 / 9.0, rel=1e-12)

    def test_g_bar_vanishes_at_half(self):
        params = RestitutionParams.from_beta(0.5)
        assert g_bar(params, 0.0) == 0.0

    def test_mu_outside_range(self, params):
        with pytest.raises(DomainError):
            lambda_of_mu(params, 1.5)

    def test_kernel_eval_bundle(self, params):
        values = kernel_eval(params, 0.25)
        assert values.lambda_val == pytest.approx(lambda_of_mu(params, 0.25))
        assert values.g_sym == pytest.approx(g_bar(params, 0.25))


class TestGamma:
    def test_elastic_closed_form(self):
        assert gamma_p(RestitutionParams(e=1.0), 2.0).value == pytest.approx(2.0 / 3.0)

    def test_sticky_closed_form(self):
        assert gamma_p(RestitutionParams(e=0.0), 2.0).value == pytest.approx(0.75)

    @pytest.mark.parametrize("beta", [1.0, 0.5])
    @pytest.mark.parametrize("p", ORDERS)
    def test_quadrature_matches_closed_forms(self, beta, p):
        params = RestitutionParams.from_beta(beta)
        value = gamma_p(params, p, use_closed_form=False).value
        assert abs(value - gamma_closed_form(beta, p)) < 1e-10

    @pytest.mark.parametrize("beta", np.linspace(0.5, 1.0, 20))
    def test_gamma_one_is_normalized(self, beta):
        params = RestitutionParams.from_beta(float(beta))
        assert abs(gamma_p(params, 1.0, use_closed_form=False).value - 1.0) < 1e-10

    def test_decreasing_and_bounded(self):
        params = RestitutionParams(e=0.8)
        values = [gamma_p(params, p).value for p in ORDERS]
        assert all(a > b for a, b in zip(values, values[1:]))
        for p, value in zip(ORDERS[1:], values[1:]):
            assert value <= min(1.0 - 1e-12, 4.0 / (p + 1.0))

    def test_rejects_nonpositive_order(self, params):
        with pytest.raises(DomainError):
            gamma_p(params, 0.0)


class TestAPlus:
    def test_head_on_energy(self):
        params = RestitutionParams.from_beta(0.75)
        v, w = np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0])
        assert a_plus_moment(v, w, params, 1.0) == pytest.approx(1.25, rel=1e-10)
        assert a_plus_via_omega(v, w, params, 1.0) == pytest.approx(1.25, rel=1e-8)

    def test_order_zero(self, params):
        v, w = np.array([0.3, -1.2, 0.5]), np.array([1.0, 0.4, -0.7])
        assert a_plus_moment(v, w, params, 0.0) == pytest.approx(2.0)

    def test_equal_velocities(self, params):
        v = np.array([0.5, 1.0, -2.0])
        assert a_plus_moment(v, v, params, 2.0) == pytest.approx(2.0 * float(v @ v) ** 2)

    def test_omega_needs_relative_velocity(self, params):
        v = np.array([1.0, 0.0, 0.0])
        with pytest.raises(DomainError):
            a_plus_via_omega(v, v, params, 2.0)

    def test_parametrizations_agree_off_axis(self):
        params = RestitutionParams.from_beta(0.6)
        v, w = np.array([0.0, 1.0, 0.0]), np.zeros(3)
        sigma_form = a_plus_moment(v, w, params, 3.0)
        assert a_plus_via_omega(v, w, params, 3.0) == pytest.approx(sigma_form, rel=1e-8)

    def test_elastic_parametrizations_agree(self):
        params = RestitutionParams(e=1.0)
        v, w = np.array([0.2, 1.0, -0.4]), np.array([-0.5, 0.3, 0.9])
        assert a_plus_via_omega(v, w, params, 2.0) == pytest.approx(
            a_plus_moment(v, w, params, 2.0), rel=1e-8
        )

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        beta=st.floats(0.5, 1.0),
        p=st.floats(1.0, 10.0),
    )
    def test_povzner_inequality(self, seed, beta, p):
        rng = np.random.default_rng(seed)
        v, w = rng.normal(size=3), rng.normal(size=3)
        params = RestitutionParams.from_beta(beta)
        gain = a_plus_moment(v, w, params, p)
        rhs = gamma_p(params, p).value * float(v @ v + w @ w) ** p
        assert gain <= rhs + 1e-8 * max(1.0, rhs)

    def test_discrete_moment_skips_coincident_atoms(self, params):
        atoms = np.zeros((2, 3))
        assert discrete_collision_moment(atoms, np.array([0.5, 0.5]), params, 2.0) == 0.0

    def test_discrete_energy_moment_is_dissipation(self):
        params = RestitutionParams.from_beta(0.75)
        atoms = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        weights = np.array([0.5, 0.5])
        # 1/2 sum_ij w_i w_j |u| (-beta(1-beta)|u|^2) with |u| = 2
        expected = 0.25 * 2.0 * (-0.75 * 0.25 * 4.0)
        assert discrete_collision_moment(atoms, weights, params, 1.0) == pytest.approx(expected, rel=1e-9)


class TestQuadrature:
    def test_sphere_average_of_constant(self):
        frame = orthonormal_frame(np.array([0.0, 0.0, 1.0]))
        value = sphere_average(lambda x: np.ones(x.shape[:-1]), frame, 8, 16)
        assert value == pytest.approx(1.0, rel=1e-14)

    def test_sphere_average_of_square(self):
        frame = orthonormal_frame(np.array([1.0, 1.0, 0.0]))
        value = sphere_average(lambda x: x[..., 0] ** 2, frame, 16, 32)
        assert value == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_frame_is_orthonormal(self):
        frame = orthonormal_frame(np.array([0.3, -2.0, 1.0]), hint=np.array([1.0, 0.0, 0.0]))
        assert np.allclose(frame @ frame.T, np.eye(3), atol=1e-14)
        assert math.isclose(frame[2] @ np.array([0.3, -2.0, 1.0]), np.linalg.norm([0.3, -2.0, 1.0]))
