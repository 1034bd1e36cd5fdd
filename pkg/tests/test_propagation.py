"""Tests for interval moment propagation and the induction constants."""

import math

import numpy as np
import pytest
from scipy.special import gammaln

from backend.moment_service.grid import Side
from backend.moment_service.normalized import NormalizedMoments, geometric_check, normalize
from backend.moment_service.propagation import (
    find_p1,
    propagate,
    propagation_constants,
    start_order,
)
from backend.shared.config import theory_constants
from backend.shared.exceptions import DomainError, InfeasibleGridError
from backend.shared.models import ForcingModel, RestitutionParams


@pytest.mark.parametrize("eps, expected", [(0.5, 1.5), (0.1, 1.5), (0.6, 2.0), (1.0, 2.0)])
def test_start_order(eps, expected):
    assert start_order(eps) == expected


class TestPropagate:
    def test_closure_only_grid_below_two(self, params):
        grid = propagate(ForcingModel.pure_diffusion(1.0), params, 2.0, p_max=1.0)
        assert grid.interval(1.0) == pytest.approx((2.0, 2.0))
        lo, hi = grid.interval(0.5)
        assert 0.0 < lo <= hi <= math.sqrt(2.0) * (1 + 1e-12)

    @pytest.mark.parametrize("m1", [0.0, -1.0, (2.0, 1.0)])
    def test_rejects_bad_seed(self, params, m1):
        with pytest.raises(DomainError):
            propagate(ForcingModel.pure_diffusion(1.0), params, m1, p_max=4.0)

    @pytest.mark.parametrize("p_max", [0.5, 3.3])
    def test_rejects_bad_top_order(self, params, p_max):
        with pytest.raises(DomainError):
            propagate(ForcingModel.pure_diffusion(1.0), params, 1.0, p_max=p_max)

    def test_friction_seed_at_forcing_equilibrium(self, params):
        # 6 mu m_0 - 2 lambda m_1 vanishes at m_1 = 3 mu / lambda; the friction
        # balance still caps m_3/2 and the grid comes out two-sided
        grid = propagate(ForcingModel.diffusion_friction(1.0, 1.0), params, 3.0, p_max=8.0)
        assert grid.diagnostics["energy_balance"] == (0.0, 0.0)
        assert not grid.diagnostics["energy_consistent"]
        for p in np.arange(0.5, 8.25, 0.5):
            lo, hi = grid.interval(float(p))
            assert 0.0 < lo <= hi < math.inf
        assert grid.interval(1.0) == pytest.approx((3.0, 3.0))

    @pytest.mark.parametrize("m1", [0.1, 0.5, 1.0, 2.0, 2.9])
    def test_friction_seeds_below_equilibrium(self, params, m1):
        grid = propagate(ForcingModel.diffusion_friction(1.0, 1.0), params, m1, p_max=6.0)
        assert all(math.isfinite(grid.interval(float(p))[1]) for p in grid.present_p)

    def test_energy_bracket_is_diagnostic_only(self, params):
        model = ForcingModel.pure_diffusion(1.0)
        grid = propagate(model, params, 1.0, p_max=4.0)
        lo, hi = grid.diagnostics["energy_balance"]
        dissipation = params.beta * (1 - params.beta)
        assert lo == pytest.approx(6.0 / (4 * dissipation))
        assert grid.interval(1.5)[1] <= hi * (1 + 1e-12)
        # m_1 = 1 lies far below the steady second moment of mu = 1
        assert grid.interval(1.5)[0] < lo

    def test_seed_far_above_energy_balance_is_infeasible(self, params):
        # Jensen forces m_3/2 >= m_1^(3/2), beyond 2 G_1 / (beta (1 - beta))
        with pytest.raises(InfeasibleGridError):
            propagate(ForcingModel.pure_diffusion(1.0), params, 1000.0, p_max=4.0)

    def test_upper_seed_at_higher_order(self, params):
        model = ForcingModel.negative_friction(0.5)
        plain = propagate(model, params, 1.0, p_max=5.0)
        seeded = propagate(model, params, 1.0, p_max=5.0, m_p0=(3.0, 0.0, 10.0))
        assert seeded.interval(3.0)[1] <= 10.0 * (1 + 1e-12)
        assert seeded.interval(5.0)[1] <= plain.interval(5.0)[1] * (1 + 1e-8)

    def test_pure_diffusion_grid(self, params):
        model = ForcingModel.pure_diffusion(1.0)
        grid = propagate(model, params, 1.0, p_max=4.0)

        assert grid.p_max == 4.0
        assert grid.interval(0.0) == (1.0, 1.0)
        assert grid.interval(1.0) == pytest.approx((1.0, 1.0))
        for p in grid.present_p:
            lo, hi = grid.interval(p)
            assert 0.0 <= lo <= hi
        assert all(grid.has(float(p)) for p in np.arange(0.5, 4.25, 0.5))
        assert math.isfinite(grid.interval(4.0)[1])

        assert grid.metadata["model"] == "pure_diffusion"
        assert grid.metadata["one_sided"] == "false"
        assert float(grid.metadata["e"]) == 0.8
        assert grid.diagnostics["p_start"] == 1.5
        assert grid.diagnostics["sweeps"] >= 1
        step1 = grid.diagnostics["step1_upper"]
        assert set(step1) == {2.0, 2.5, 3.0, 3.5, 4.0}
        assert all(value > 0 for value in step1.values())

    def test_interval_seed_widens_result(self, params):
        model = ForcingModel.pure_diffusion(1.0)
        exact = propagate(model, params, 1.0, p_max=3.0)
        loose = propagate(model, params, (0.9, 1.1), p_max=3.0)
        lo, hi = loose.interval(1.0)
        assert 0.9 <= lo <= hi <= 1.1
        assert loose.interval(3.0)[1] >= exact.interval(3.0)[1] * (1 - 1e-8)
        assert loose.seed_m1 == (0.9, 1.1)

    @pytest.mark.slow
    def test_growth_of_pure_diffusion_bounds(self):
        grid = propagate(
            ForcingModel.pure_diffusion(1.0), RestitutionParams(e=0.8), 1.0, p_max=20.0
        )
        p = np.arange(1.0, 20.25, 0.5)
        log_hi = np.array([grid.log_value(float(q), Side.HI) for q in p])

        def upper_only(a: float, b: float) -> NormalizedMoments:
            return NormalizedMoments.from_log_values(p, log_hi - gammaln(a * p + b), a, b)

        assert geometric_check(upper_only(4.0 / 3.0, 0.9), 2.0).holds
        assert not geometric_check(upper_only(2.0, 0.9), 2.0).holds


@pytest.mark.slow
class TestGrowthDiscrimination:
    """Two-sided grids up to p = 20 are geometric only under their own exponent."""

    @pytest.mark.parametrize(
        "model, m1, right_a, wrong_a",
        [
            (ForcingModel.pure_diffusion(1.0), 1.0, 4.0 / 3.0, 2.0),
            (ForcingModel.diffusion_friction(1.0, 1.0), 2.5, 1.0, 2.0),
            (ForcingModel.negative_friction(0.5), 1.0, 2.0, 1.0),
        ],
        ids=["pure_diffusion", "diffusion_friction", "negative_friction"],
    )
    def test_exponent_is_discriminated(self, model, m1, right_a, wrong_a):
        grid = propagate(model, RestitutionParams(e=0.8), m1, p_max=20.0)
        assert grid.metadata["one_sided"] == "false"

        right = normalize(grid, right_a, theory_constants.default_b(right_a))
        fit = geometric_check(right, 2.0)
        assert fit.holds, fit
        assert not fit.one_sided
        assert fit.lower_trend is not None and fit.upper_trend is not None

        wrong = normalize(grid, wrong_a, theory_constants.default_b(wrong_a))
        assert not geometric_check(wrong, 2.0).holds


class TestFindP1:
    def test_bisects_doubling_ladder(self):
        assert find_p1(lambda p: p >= 7.3, 1.5) == 7.5

    def test_condition_at_start(self):
        assert find_p1(lambda p: True, 2.0) == 2.0

    def test_never_satisfied(self):
        assert find_p1(lambda p: False, 1.5, p_max=100.0) is None


class TestPropagationConstants:
    def test_fields(self, params):
        constants = propagation_constants(ForcingModel.pure_diffusion(1.0), params, b=0.5)
        assert constants.eps == 0.5
        assert constants.a == pytest.approx(4.0 / 3.0)
        assert constants.b == 0.5
        assert constants.K_eps >= 1.0
        assert constants.A_ab > 0
        assert 0 < constants.c3 <= constants.C3
        assert constants.C5 == pytest.approx(1.5)
        if constants.p1 is not None:
            assert constants.p1 >= 1.5

    def test_default_exponent_follows_forcing(self, params):
        constants = propagation_constants(ForcingModel.negative_friction(1.0), params)
        assert constants.a == pytest.approx(2.0)
        assert constants.b == pytest.approx(0.9)
