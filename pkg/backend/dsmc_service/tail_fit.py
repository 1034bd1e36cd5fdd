"""
Stretched-exponential fit of the speed histogram's tail.

The radial density f(v) = count / (n 4 pi v^2 dv) is fitted on the window
between two speed percentiles by log f = c - r v^s. Confidence intervals come
from a Poisson bootstrap of the bin counts.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import curve_fit

from backend.moment_service.grid import MomentGrid
from backend.moment_service.tail import estimate_tail_order
from backend.shared.config import settings
from backend.shared.exceptions import GranularTailsError, InsufficientTailStatistics
from backend.shared.models import MomentTable, SpeedHistogram, TailEstimate


logger = logging.getLogger(__name__)

MIN_WINDOW_BINS = 10
MIN_LOG_DROP = 1.0
S_BOUNDS = (0.2, 4.0)
# Orders below this are not enough for the moment cross-check
CROSS_CHECK_MIN_P_MAX = 5.5
_MAX_NFEV = 10_000


def log_stretched_exponential(v: np.ndarray, c: float, r: float, s: float) -> np.ndarray:
    return c - r * np.power(v, s)


def radial_density(histogram: SpeedHistogram) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin centres, counts and the density f(|v|) per unit volume of velocity space."""
    edges = np.asarray(histogram.edges, dtype=float)
    counts = np.asarray(histogram.counts, dtype=float)
    centres = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    with np.errstate(divide="ignore", invalid="ignore"):
        density = counts / (histogram.n_samples * 4.0 * math.pi * centres**2 * widths)
    return centres, counts, density


def tail_window(
    histogram: SpeedHistogram,
    lo_percentile: Optional[float] = None,
    hi_percentile: Optional[float] = None,
) -> np.ndarray:
    """Boolean mask of the bins lying between the two speed percentiles."""
    lo_percentile = settings.TAIL_LO_PERCENTILE if lo_percentile is None else lo_percentile
    hi_percentile = settings.TAIL_HI_PERCENTILE if hi_percentile is None else hi_percentile
    counts = np.asarray(histogram.counts, dtype=float)
    total = counts.sum() + histogram.overflow
    if total <= 0:
        raise InsufficientTailStatistics("Histogram is empty")
    after = np.cumsum(counts) / total
    before = after - counts / total
    return (before >= lo_percentile) & (after <= hi_percentile)


def _initial_guess(v: np.ndarray, y: np.ndarray) -> List[float]:
    s0 = 1.5
    span = v[-1] ** s0 - v[0] ** s0
    r0 = max((y[0] - y[-1]) / span, 1e-3) if span > 0 else 1.0
    return [float(y[0] + r0 * v[0] ** s0), float(r0), s0]


def _fit(v: np.ndarray, counts: np.ndarray, n_samples: float, widths: np.ndarray) -> Tuple[float, float, float]:
    y = np.log(counts / (n_samples * 4.0 * math.pi * v**2 * widths))
    popt, _ = curve_fit(
        log_stretched_exponential,
        v,
        y,
        p0=_initial_guess(v, y),
        sigma=1.0 / np.sqrt(counts),
        bounds=([-np.inf, 0.0, S_BOUNDS[0]], [np.inf, np.inf, S_BOUNDS[1]]),
        max_nfev=_MAX_NFEV,
    )
    c, r, s = popt
    return float(c), float(r), float(s)


def _moment_cross_check(moments: MomentTable) -> Dict[str, object]:
    values = {row.p: row.m for row in moments.rows if row.reliable and row.p > 0}
    if not values or max(values) < CROSS_CHECK_MIN_P_MAX:
        return {"moment_check_error": "too few reliable moments"}
    try:
        estimate = estimate_tail_order(
            MomentGrid.from_values(values),
            p_from=2.0,
            min_p_max=CROSS_CHECK_MIN_P_MAX,
        )
    except GranularTailsError as exc:
        return {"moment_check_error": str(exc)}
    return {"moment_s": estimate.s, "moment_r_star": estimate.r_star}


def fit_tail(
    histogram: SpeedHistogram,
    moments: Optional[MomentTable] = None,
    seed: int = 0,
    one_sided: bool = False,
    n_boot: Optional[int] = None,
    lo_percentile: Optional[float] = None,
    hi_percentile: Optional[float] = None,
) -> TailEstimate:
    """
    Fit log f(|v|) = c - r |v|^s on the percentile window of the histogram.

    Args:
        histogram: Speed histogram with fixed edges
        moments: Empirical moments for the moment-based cross-check
        seed: Bootstrap seed
        one_sided: Report s as a lower bound only (shear)
        n_boot: Bootstrap resamples (default BOOTSTRAP_SAMPLES)
        lo_percentile, hi_percentile: Window (defaults from settings)

    Returns:
        TailEstimate with method 'histogram'

    Raises:
        InsufficientTailStatistics: Fewer than 10 populated bins in the window,
            or the log-density falls by less than 1 across it
    """
    n_boot = settings.BOOTSTRAP_SAMPLES if n_boot is None else n_boot
    window = tail_window(histogram, lo_percentile, hi_percentile)
    centres, counts, density = radial_density(histogram)
    widths = np.diff(np.asarray(histogram.edges, dtype=float))

    use = window & (counts > 0) & (centres > 0)
    if int(use.sum()) < MIN_WINDOW_BINS:
        raise InsufficientTailStatistics(
            f"Only {int(use.sum())} populated bins in the tail window (need {MIN_WINDOW_BINS})"
        )
    v, n_v, w_v = centres[use], counts[use], widths[use]
    log_f = np.log(density[use])
    drop = float(log_f[: max(1, log_f.size // 5)].mean() - log_f[-max(1, log_f.size // 5):].mean())
    if drop < MIN_LOG_DROP:
        raise InsufficientTailStatistics(
            f"Log-density falls by only {drop:.3g} across the tail window (need {MIN_LOG_DROP})"
        )

    try:
        c, r, s = _fit(v, n_v, histogram.n_samples, w_v)
    except (RuntimeError, ValueError) as exc:
        raise InsufficientTailStatistics(f"Tail fit did not converge: {exc}") from exc

    rng = np.random.Generator(np.random.PCG64(seed))
    boot_s: List[float] = []
    boot_r: List[float] = []
    for _ in range(n_boot):
        resampled = rng.poisson(n_v).astype(float)
        keep = resampled > 0
        if int(keep.sum()) < MIN_WINDOW_BINS:
            continue
        try:
            _, r_b, s_b = _fit(v[keep], resampled[keep], histogram.n_samples, w_v[keep])
        except (RuntimeError, ValueError):
            continue
        boot_s.append(s_b)
        boot_r.append(r_b)

    s_ci = r_ci = None
    if len(boot_s) >= 2:
        s_ci = (float(np.percentile(boot_s, 2.5)), float(np.percentile(boot_s, 97.5)))
        r_ci = (float(np.percentile(boot_r, 2.5)), float(np.percentile(boot_r, 97.5)))

    pinned = min(abs(s - S_BOUNDS[0]), abs(s - S_BOUNDS[1])) < 1e-6
    diagnostics: Dict[str, object] = {
        "log_c": c,
        "v_lo": float(v[0]),
        "v_hi": float(v[-1]),
        "bins": int(use.sum()),
        "log_drop": drop,
        "bootstrap_fits": len(boot_s),
        "s_pinned": pinned,
    }
    if moments is not None:
        diagnostics.update(_moment_cross_check(moments))

    logger.info("Histogram tail fit s=%.3f r=%.4g on |v| in [%.3g, %.3g]", s, r, v[0], v[-1])
    return TailEstimate(
        s=s,
        r_star=r,
        success=r > 0 and not pinned,
        one_sided=one_sided,
        method="histogram",
        s_ci=s_ci,
        r_ci=r_ci,
        diagnostics=diagnostics,
    )
