"""Shared fixtures for the granular-tails test suite."""

import math
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import pytest

from backend.moment_service.grid import MomentGrid
from backend.shared.models import (
    ForcingModel,
    MomentRow,
    MomentTable,
    RestitutionParams,
    SpeedHistogram,
    SteadyStateReport,
)


def maxwellian_moment(p: float, temperature: float = 1.0) -> float:
    """m_p = (2T)^p Gamma(p + 3/2) / Gamma(3/2) for a Maxwellian with per-component variance T."""
    return math.exp(p * math.log(2.0 * temperature) + math.lgamma(p + 1.5) - math.lgamma(1.5))


def half_orders(p_max: float, start: float = 0.5) -> np.ndarray:
    return np.arange(start, p_max + 0.25, 0.5)


@pytest.fixture
def unit_grid():
    """Two-atom ensemble v = +/- e1 with equal weights: m_p = 1 for every p."""

    def build(p_max: float = 4.0) -> MomentGrid:
        return MomentGrid.from_values({float(p): 1.0 for p in half_orders(p_max)})

    return build


@pytest.fixture
def params():
    return RestitutionParams(e=0.8)


def make_report(
    rows: Iterable[Tuple[float, float, float]],
    model: Optional[ForcingModel] = None,
    e: float = 0.8,
    seed: int = 0,
) -> SteadyStateReport:
    """Minimal steady-state report carrying the given (p, m, stderr) rows."""
    table = MomentTable(
        rows=[MomentRow(p=p, m=m, stderr=err) for p, m, err in rows],
        n_particles=1000,
        p_max_reliable=math.log(1000) / 2.0,
    )
    return SteadyStateReport(
        model=model,
        restitution=RestitutionParams(e=e),
        seed=seed,
        n_particles=1000,
        dt=0.01,
        t_burn=1.0,
        t_avg=1.0,
        moments=table,
        histogram=SpeedHistogram(edges=[0.0, 1.0, 2.0], counts=[10.0, 5.0], n_samples=15.0),
        energy_residual=0.0,
        energy_residual_sigma=0.0,
        energy_balanced=True,
        stationary=True,
        m1_drift=0.0,
        m1_drift_sigma=0.0,
        overflow_fraction=0.0,
        recenter_drift_max=0.0,
        second_moment_tensor=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    )


def grid_metadata(model: ForcingModel, e: float) -> Dict[str, str]:
    return {
        "model": model.kind.value,
        "mu": repr(model.mu),
        "lambda": repr(model.lam),
        "kappa": repr(model.kappa),
        "e": repr(e),
        "one_sided": str(model.is_shear).lower(),
    }
