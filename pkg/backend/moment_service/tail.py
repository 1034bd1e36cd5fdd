"""
Tail-order estimation from moment growth.

For each trial order s the moments are normalized with a = 2/s and b = 1; the
s whose normalized moments are closest to geometric wins, and the radius r*
is read off the root test on the series coefficients z_{sk/2}.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy.special import gammaln

from backend.moment_service.grid import MomentGrid
from backend.moment_service.normalized import (
    NormalizedMoments,
    flatness_residual,
    geometric_check,
)
from backend.shared.config import settings
from backend.shared.exceptions import DomainError, InconclusiveEstimateError
from backend.shared.models import TailEstimate


logger = logging.getLogger(__name__)

# Shift used for every trial order
SCAN_B = 1.0
MIN_P_MAX = 10.0
_TIE_TOL = 1e-12


def _representative_log_moments(grid: MomentGrid) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Mid-point of each log interval, or the upper end when lower ends are missing."""
    mask = grid.present & (grid.p_values > 0)
    p = grid.p_values[mask]
    lo, hi = grid.log_lo[mask], grid.log_hi[mask]
    if not np.all(np.isfinite(hi)):
        raise DomainError("Tail estimation needs finite upper ends on the whole grid")
    one_sided = grid.metadata.get("one_sided") == "true" or not np.all(np.isfinite(lo))
    values = hi if one_sided else 0.5 * (lo + hi)
    return p, values, one_sided


def estimate_tail_order(
    grid: MomentGrid,
    p_from: float = 2.0,
    s_min: Optional[float] = None,
    s_max: Optional[float] = None,
    s_step: Optional[float] = None,
    min_p_max: float = MIN_P_MAX,
) -> TailEstimate:
    """
    Scan tail orders s and keep the one under which z_p is most nearly geometric.

    Args:
        grid: Moment grid reaching p >= 10 with finite upper ends
        p_from: First order used by the fit
        s_min, s_max, s_step: Scan range (defaults to settings)
        min_p_max: Shortest grid accepted; empirical tables use a lower ceiling

    Returns:
        TailEstimate with diagnostics (residual, validated range, trial count)

    Raises:
        InconclusiveEstimateError: No s passes geometric_check
    """
    s_min = settings.S_MIN if s_min is None else s_min
    s_max = settings.S_MAX if s_max is None else s_max
    s_step = settings.S_STEP if s_step is None else s_step
    if grid.p_max < min_p_max:
        raise DomainError(f"Tail estimation needs p_max >= {min_p_max:g}, got {grid.p_max:g}")

    p_all, log_m_all, one_sided = _representative_log_moments(grid)
    keep = p_all >= p_from - 1e-9
    p, log_m = p_all[keep], log_m_all[keep]

    n_trials = int(round((s_max - s_min) / s_step)) + 1
    best_s: Optional[float] = None
    best_residual = math.inf
    best_z: Optional[np.ndarray] = None
    passing = 0
    for i in range(n_trials):
        s = round(s_min + i * s_step, 10)
        a = 2.0 / s
        log_z = log_m - gammaln(a * p + SCAN_B)
        z = NormalizedMoments.from_log_values(p, log_z, a, SCAN_B)
        if not geometric_check(z, p_from).holds:
            continue
        passing += 1
        residual = flatness_residual(p, log_z)
        # ties go to the smaller s, which is scanned first
        if residual < best_residual - _TIE_TOL:
            best_s, best_residual, best_z = s, residual, log_z

    if best_s is None or best_z is None:
        raise InconclusiveEstimateError(
            f"No tail order in [{s_min}, {s_max}] gives geometric normalized moments"
        )

    # series index k = 2p/s; lim sup of z_k^(1/k) taken over the top quartile of k
    k = 2.0 * p / best_s
    top = k >= np.quantile(k, 0.75)
    r_star = math.exp(-float(np.max(best_z[top] / k[top])))

    logger.info(
        "Tail order estimate s=%.2f r*=%.4g (%d of %d trial orders geometric)",
        best_s,
        r_star,
        passing,
        n_trials,
    )
    return TailEstimate(
        s=best_s,
        r_star=r_star,
        success=0.0 < best_s <= 2.0 + 1e-9 and r_star > 0,
        one_sided=one_sided,
        method="moments",
        diagnostics={
            "residual": best_residual,
            "p_from": float(p[0]),
            "p_to": float(p[-1]),
            "trials": n_trials,
            "geometric_trials": passing,
        },
    )
