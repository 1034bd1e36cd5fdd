"""Tests for steady-state runs, empirical moments and the histogram tail fit."""

import math

import numpy as np
import pytest

from backend.dsmc_service.ensemble import ParticleEnsemble, init_ensemble
from backend.dsmc_service.simulator import (
    MomentAccumulator,
    _jackknife,
    empirical_moments,
    reliability_ceiling,
    run_to_steady,
    seed_sensitivity,
    simulate,
)
from backend.dsmc_service.tail_fit import fit_tail, radial_density, tail_window
from backend.moment_service.propagation import propagate
from backend.report_service.artifacts import compare
from backend.shared.exceptions import DomainError, InsufficientTailStatistics
from backend.shared.models import (
    DSMCBlock,
    ExperimentConfig,
    ForcingKind,
    ForcingModel,
    RestitutionParams,
    SpeedHistogram,
)
from tests.conftest import make_report


class TestEmpiricalMoments:
    def test_two_atoms(self):
        ensemble = ParticleEnsemble(np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]), seed=0)
        table = empirical_moments(ensemble, [0.0, 0.5, 1.0, 2.0])
        assert table.as_dict() == pytest.approx({0.0: 1.0, 0.5: 1.0, 1.0: 1.0, 2.0: 1.0})
        assert table.get(2.0).stderr == 0.0
        # log(2)/2 < 0.5
        assert not table.get(0.5).reliable

    def test_maxwellian_fourth_moment(self):
        ensemble = init_ensemble(200_000, 1.0, seed=17)
        row = empirical_moments(ensemble, [2.0]).get(2.0)
        assert row.stderr > 0
        assert abs(row.m - 15.0) <= 4.0 * row.stderr
        assert row.reliable

    def test_no_orders(self):
        table = empirical_moments(init_ensemble(10, 1.0, seed=0), [])
        assert table.rows == []
        assert table.p_max_reliable == pytest.approx(math.log(10) / 2)

    def test_rejects_negative_order(self):
        with pytest.raises(DomainError):
            empirical_moments(init_ensemble(10, 1.0, seed=0), [-0.5])

    def test_empty_accumulator(self):
        accumulator = MomentAccumulator([1.0], np.linspace(0.0, 1.0, 5))
        with pytest.raises(DomainError):
            empirical_moments(accumulator, [1.0])

    def test_jackknife_of_single_observations(self):
        samples = np.random.default_rng(3).normal(size=(50, 2))
        expected = samples.std(axis=0, ddof=1) / math.sqrt(50)
        assert np.allclose(_jackknife(samples, 50), expected, rtol=1e-10)

    def test_jackknife_needs_two_blocks(self):
        assert np.array_equal(_jackknife(np.ones((1, 3)), 20), np.zeros(3))


def test_reliability_ceiling():
    assert reliability_ceiling(200_000) == pytest.approx(6.1, abs=0.01)


class TestRunToSteady:
    def test_elastic_unforced_gas(self):
        ensemble = init_ensemble(2000, 1.0, seed=5)
        m1 = ensemble.energy()
        report = run_to_steady(
            ensemble, None, RestitutionParams(e=1.0), dt=0.05, t_burn=0.0, t_avg=2.0, sample_every=2, p_max=2.0
        )
        assert report.model is None
        assert report.moments.get(1.0).m == pytest.approx(m1, rel=1e-10)
        assert report.moments.get(0.0).m == 1.0
        assert report.diagnostics["m1_final"] == pytest.approx(m1, rel=1e-10)
        assert report.stationary
        assert report.energy_balanced
        assert report.diagnostics["steps_avg"] == 40
        assert report.histogram.n_samples == 2000 * report.diagnostics["snapshots"]
        assert len(report.second_moment_tensor) == 3

    def test_step_must_resolve_forcing(self):
        with pytest.raises(DomainError):
            run_to_steady(
                init_ensemble(100, 1.0, seed=0),
                ForcingModel.diffusion_friction(1.0, 1.0),
                RestitutionParams(e=0.8),
                dt=0.2,
                t_burn=0.0,
                t_avg=1.0,
            )

    def test_rejects_window(self):
        with pytest.raises(DomainError):
            run_to_steady(init_ensemble(100, 1.0, seed=0), None, RestitutionParams(e=0.8), dt=0.05, t_burn=0.0, t_avg=0.0)

    def test_friction_cools_below_forcing_equilibrium(self):
        report = run_to_steady(
            init_ensemble(2000, 1.0, seed=2),
            ForcingModel.diffusion_friction(1.0, 1.0),
            RestitutionParams(e=0.8),
            dt=0.05,
            t_burn=3.0,
            t_avg=2.0,
            sample_every=2,
            p_max=2.0,
        )
        assert report.moments.get(1.0).m < 3.0
        assert report.diagnostics["accepted"] > 0
        assert report.overflow_fraction >= 0.0

    def test_simulate_with_given_ensemble(self):
        config = ExperimentConfig(
            pipeline="simulate",
            model=ForcingModel.pure_diffusion(1.0),
            restitution=0.8,
            seed=4,
            dsmc=DSMCBlock(n=200, dt=0.05, t_burn=0.5, t_avg=1.0, sample_every=2, p_max=2.0),
        )
        first = simulate(config)
        second = simulate(config, ensemble=init_ensemble(200, 1.0, seed=4))
        assert first.seed == second.seed == 4
        assert first.moments.as_dict() == second.moments.as_dict()

    @pytest.mark.slow
    def test_negative_friction_seed_independence(self):
        model = ForcingModel.negative_friction(0.1)
        reports = [
            run_to_steady(
                init_ensemble(20_000, 1.0, seed=seed),
                model,
                RestitutionParams(e=0.8),
                dt=0.05,
                t_burn=20.0,
                t_avg=20.0,
                p_max=2.0,
            )
            for seed in (1, 2)
        ]
        assert seed_sensitivity(reports)["consistent"]


class TestSeedSensitivity:
    def test_consistent_seeds(self):
        result = seed_sensitivity(
            [make_report([(1.0, 3.0, 0.01)], seed=1), make_report([(1.0, 3.02, 0.01)], seed=2)]
        )
        assert result["seeds"] == [1, 2]
        assert result["m1_spread"] == pytest.approx(0.02)
        assert result["consistent"]

    def test_inconsistent_seeds(self):
        result = seed_sensitivity(
            [make_report([(1.0, 3.0, 0.01)], seed=1), make_report([(1.0, 3.1, 0.01)], seed=2)]
        )
        assert result["max_z"] > 3.0
        assert not result["consistent"]

    def test_needs_two_reports_with_m1(self):
        with pytest.raises(DomainError):
            seed_sensitivity([make_report([(1.0, 3.0, 0.01)])])
        with pytest.raises(DomainError):
            seed_sensitivity([make_report([(2.0, 15.0, 0.1)]), make_report([(2.0, 15.0, 0.1)])])


def _histogram(log_f, v_max: float, bins: int, n: float = 1e9) -> SpeedHistogram:
    edges = np.linspace(0.0, v_max, bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    counts = n * 4.0 * math.pi * centres**2 * np.exp(log_f(centres)) * widths
    return SpeedHistogram(edges=edges.tolist(), counts=counts.tolist(), n_samples=float(counts.sum()))


class TestFitTail:
    def test_maxwellian_histogram(self):
        histogram = _histogram(lambda c: -1.5 * math.log(2.0 * math.pi) - 0.5 * c**2, 8.0, 400)
        estimate = fit_tail(histogram, n_boot=20)
        assert estimate.s == pytest.approx(2.0, abs=0.05)
        assert estimate.r_star == pytest.approx(0.5, rel=0.05)
        assert estimate.method == "histogram"
        assert estimate.success
        assert estimate.s_ci is not None

    def test_stretched_exponential_histogram(self):
        histogram = _histogram(lambda c: -2.0 * c**1.5, 5.0, 500)
        estimate = fit_tail(histogram, n_boot=20, one_sided=True)
        assert estimate.s == pytest.approx(1.5, abs=0.05)
        assert estimate.r_star == pytest.approx(2.0, rel=0.1)
        assert estimate.one_sided

    def test_flat_counts_have_no_tail(self):
        edges = np.linspace(0.0, 8.0, 401)
        histogram = SpeedHistogram(edges=edges.tolist(), counts=[1000.0] * 400, n_samples=400_000.0)
        with pytest.raises(InsufficientTailStatistics):
            fit_tail(histogram, n_boot=5)

    def test_empty_histogram(self):
        histogram = SpeedHistogram(edges=[0.0, 1.0, 2.0], counts=[0.0, 0.0], n_samples=0.0)
        with pytest.raises(InsufficientTailStatistics):
            fit_tail(histogram)

    def test_window_and_density(self):
        histogram = SpeedHistogram(edges=[0.0, 1.0, 2.0, 3.0], counts=[50.0, 45.0, 5.0], n_samples=100.0)
        assert tail_window(histogram, 0.9, 1.0).tolist() == [False, False, True]
        centres, counts, density = radial_density(histogram)
        assert centres.tolist() == [0.5, 1.5, 2.5]
        assert density[2] == pytest.approx(5.0 / (100.0 * 4.0 * math.pi * 6.25))


_DESKTOP_MODELS = [
    ForcingModel.pure_diffusion(1.0),
    ForcingModel.diffusion_friction(1.0, 1.0),
    ForcingModel.negative_friction(0.1),
    ForcingModel.shear_flow(0.1),
]


@pytest.fixture(scope="module", params=_DESKTOP_MODELS, ids=lambda model: model.kind.value)
def desktop_report(request):
    """Steady state at N = 2e5, e = 0.8 and the default DSMC block."""
    config = ExperimentConfig(
        pipeline="simulate",
        model=request.param,
        restitution=0.8,
        seed=42,
        dsmc=DSMCBlock(n=200_000, p_max=6.0),
    )
    return simulate(config)


@pytest.mark.slow
class TestDesktopReproduction:
    def test_tail_order(self, desktop_report):
        kind = desktop_report.model.kind
        estimate = fit_tail(
            desktop_report.histogram,
            moments=desktop_report.moments,
            seed=desktop_report.seed,
            one_sided=desktop_report.model.is_shear,
        )
        # the moment-growth scan runs alongside the histogram fit
        assert "moment_s" in estimate.diagnostics or "moment_check_error" in estimate.diagnostics
        if kind == ForcingKind.SHEAR_FLOW:
            assert estimate.one_sided
            assert estimate.s >= 0.8
        else:
            expected = {
                ForcingKind.PURE_DIFFUSION: 1.5,
                ForcingKind.DIFFUSION_FRICTION: 2.0,
                ForcingKind.NEGATIVE_FRICTION: 1.0,
            }[kind]
            assert abs(estimate.s - expected) <= 0.25, estimate

    def test_moments_inside_propagated_grid(self, desktop_report):
        row = desktop_report.moments.get(1.0)
        seed = (row.m - 3.0 * row.stderr, row.m + 3.0 * row.stderr)
        grid = propagate(desktop_report.model, desktop_report.restitution, seed, p_max=6.0)
        consistency = compare(desktop_report, grid, p_max=6.0)
        assert {r.p for r in consistency.rows} >= {1.5, 2.0, 3.0}
        assert consistency.passed, consistency.violations
