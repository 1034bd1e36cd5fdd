"""
Steady-state runs: Strang splitting, burn-in, time averaging and diagnostics.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from backend.dsmc_service.collisions import collision_step
from backend.dsmc_service.ensemble import ParticleEnsemble, init_ensemble
from backend.dsmc_service.forcing import forcing_step
from backend.dsmc_service.tail_fit import fit_tail
from backend.shared.config import settings
from backend.shared.exceptions import DomainError, InsufficientTailStatistics
from backend.shared.models import (
    ExperimentConfig,
    ForcingModel,
    MomentRow,
    MomentTable,
    RestitutionParams,
    SpeedHistogram,
    SteadyStateReport,
)


logger = logging.getLogger(__name__)

# dt * max(lambda, kappa) must stay below this
STABILITY_LIMIT = 0.1
DEFAULT_SAMPLE_EVERY = 10
DEFAULT_P_MAX = 6.0
# Histogram range relative to the largest speed at the start of averaging
HIST_RANGE_FACTOR = 1.5
# Absolute slack on the 3-sigma tests when the estimator has zero spread
_ZERO_SPREAD_TOL = 1e-12


def reliability_ceiling(n: int) -> float:
    """Largest p whose empirical moment is trusted for N particles: log(N)/2."""
    return math.log(n) / 2.0


def _power_sums(sq: np.ndarray, p: np.ndarray, threads: int) -> np.ndarray:
    """sum_i |v_i|^{2p} per p, reduced over particle chunks in a fixed order."""
    if threads <= 1 or sq.size < 2 * threads:
        return (sq[None, :] ** p[:, None]).sum(axis=1)
    chunks = np.array_split(sq, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        partials = list(pool.map(lambda chunk: (chunk[None, :] ** p[:, None]).sum(axis=1), chunks))
    return np.sum(np.stack(partials), axis=0)


class MomentAccumulator:
    """Time series of moment snapshots plus a fixed-edge speed histogram."""

    def __init__(self, p_list: Sequence[float], edges: np.ndarray, threads: int = 1):
        self.p = np.asarray(p_list, dtype=float)
        self.edges = np.asarray(edges, dtype=float)
        self.threads = threads
        self.rows: List[np.ndarray] = []
        self.times: List[float] = []
        self.counts = np.zeros(self.edges.size - 1)
        self.n_samples = 0
        self.overflow = 0
        self.tensor = np.zeros((3, 3))
        self.n_particles = 0

    def add(self, ensemble: ParticleEnsemble) -> None:
        v = ensemble.velocities
        sq = np.einsum("ij,ij->i", v, v)
        self.rows.append(_power_sums(sq, self.p, self.threads) / ensemble.n)
        self.times.append(ensemble.time)

        speed = np.sqrt(sq)
        counts, _ = np.histogram(speed, bins=self.edges)
        self.counts += counts
        self.overflow += int(np.count_nonzero(speed > self.edges[-1]))
        self.n_samples += ensemble.n
        self.tensor += v.T @ v / ensemble.n
        self.n_particles = ensemble.n

    def __len__(self) -> int:
        return len(self.rows)

    def samples(self, p_list: Sequence[float]) -> np.ndarray:
        """Snapshot matrix (n_snapshots, len(p_list)) for the requested orders."""
        columns = []
        for p in p_list:
            hit = np.flatnonzero(np.abs(self.p - p) < 1e-12)
            if hit.size == 0:
                raise DomainError(f"Order p = {p:g} was not accumulated")
            columns.append(int(hit[0]))
        return np.asarray(self.rows)[:, columns]

    def histogram(self) -> SpeedHistogram:
        return SpeedHistogram(
            edges=self.edges.tolist(),
            counts=self.counts.tolist(),
            n_samples=float(self.n_samples),
            overflow=float(self.overflow),
        )

    def second_moment_tensor(self) -> np.ndarray:
        return self.tensor / max(1, len(self.rows))


def _jackknife(samples: np.ndarray, n_blocks: int) -> np.ndarray:
    """
    Delete-one-block jackknife standard error of column means.

    Args:
        samples: (n, k) array, rows are observations in order
        n_blocks: Number of contiguous blocks (clipped to n)

    Returns:
        Standard errors per column; zeros when fewer than two blocks exist
    """
    n = samples.shape[0]
    blocks = min(n_blocks, n)
    if blocks < 2:
        return np.zeros(samples.shape[1])
    total = samples.sum(axis=0)
    pieces = np.array_split(samples, blocks, axis=0)
    leave_out = np.stack([(total - piece.sum(axis=0)) / (n - piece.shape[0]) for piece in pieces])
    centre = leave_out.mean(axis=0)
    return np.sqrt((blocks - 1) / blocks * ((leave_out - centre) ** 2).sum(axis=0))


def empirical_moments(
    source: Union[ParticleEnsemble, MomentAccumulator],
    p_list: Sequence[float],
    n_blocks: Optional[int] = None,
) -> MomentTable:
    """
    Weighted power sums m_p = sum_i w_i |v_i|^{2p} with jackknife errors.

    A single ensemble is blocked over particles; an accumulator is blocked
    over time so that correlated snapshots share a block.

    Args:
        source: One ensemble or a time-averaging accumulator
        p_list: Orders to report (any finite p >= 0)
        n_blocks: Jackknife blocks (default JACKKNIFE_BLOCKS)

    Returns:
        MomentTable; rows beyond log(N)/2 or with a relative error above
        RELIABLE_REL_ERR are flagged unreliable
    """
    n_blocks = n_blocks or settings.JACKKNIFE_BLOCKS
    orders = sorted({float(p) for p in p_list})
    if any(p < 0 or not math.isfinite(p) for p in orders):
        raise DomainError(f"Moment orders must be finite and nonnegative, got {orders}")

    if isinstance(source, ParticleEnsemble):
        n_particles = source.n
    else:
        n_particles = source.n_particles
        if len(source) == 0:
            raise DomainError("No snapshots were accumulated")
    ceiling = reliability_ceiling(n_particles)

    if not orders:
        return MomentTable(rows=[], n_particles=n_particles, p_max_reliable=ceiling)

    p = np.asarray(orders)
    if isinstance(source, ParticleEnsemble):
        sq = np.einsum("ij,ij->i", source.velocities, source.velocities)
        samples = (sq[:, None] ** p[None, :])
    else:
        samples = source.samples(orders)
    means = samples.mean(axis=0)
    errors = _jackknife(samples, n_blocks)

    rows = []
    for order, m, err in zip(orders, means, errors):
        if order == 0.0:
            m, err = 1.0, 0.0
        relative = err / m if m > 0 else 0.0
        reliable = order <= ceiling and relative <= settings.RELIABLE_REL_ERR
        rows.append(MomentRow(p=order, m=float(m), stderr=float(err), reliable=bool(reliable)))

    above = [order for order in orders if order > ceiling]
    if above:
        logger.warning(
            "Moments at p = %s exceed the reliability ceiling log(N)/2 = %.2f for N=%d",
            ", ".join(f"{order:g}" for order in above),
            ceiling,
            n_particles,
        )
    return MomentTable(rows=rows, n_particles=n_particles, p_max_reliable=ceiling)


def _block_rates(marks: List[Dict[str, float]]) -> np.ndarray:
    """Net energy rate (injected - dissipated)/duration per averaging block."""
    rates = []
    for start, end in zip(marks[:-1], marks[1:]):
        span = end["time"] - start["time"]
        if span <= 0:
            continue
        net = (end["injected"] - start["injected"]) - (end["dissipated"] - start["dissipated"])
        rates.append(net / span)
    return np.asarray(rates)


def _m1_drift(times: np.ndarray, m1: np.ndarray, t_avg: float, n_blocks: int):
    """Drift of m_1 over the window from a regression on block means."""
    if times.size < 3:
        return 0.0, 0.0
    blocks = min(n_blocks, times.size)
    t_means = np.array([chunk.mean() for chunk in np.array_split(times, blocks)])
    m_means = np.array([chunk.mean() for chunk in np.array_split(m1, blocks)])
    if blocks < 3 or np.ptp(m_means) == 0.0:
        return 0.0, 0.0
    fit = stats.linregress(t_means, m_means)
    return float(fit.slope * t_avg), float(fit.stderr * t_avg)


def _within_three_sigma(value: float, sigma: float, scale: float) -> bool:
    return abs(value) <= 3.0 * sigma + _ZERO_SPREAD_TOL * max(1.0, abs(scale))


def run_to_steady(
    ensemble: ParticleEnsemble,
    model: Optional[ForcingModel],
    params: RestitutionParams,
    dt: float,
    t_burn: float,
    t_avg: float,
    sample_every: Optional[int] = None,
    p_max: Optional[float] = None,
) -> SteadyStateReport:
    """
    Burn in, then time-average moments and the speed histogram.

    Each step is half a forcing step, one collision step and another half
    forcing step.

    Args:
        ensemble: Starting ensemble, advanced in place
        model: Forcing term; None runs the unforced gas
        params: Restitution parameters
        dt: Time step with dt * max(lambda, kappa) <= 0.1
        t_burn: Burn-in time (>= 0)
        t_avg: Averaging time (> 0)
        sample_every: Steps between snapshots
        p_max: Largest half-integer moment order reported

    Returns:
        SteadyStateReport
    """
    if dt <= 0 or t_avg <= 0 or t_burn < 0:
        raise DomainError(f"Need dt > 0, t_avg > 0, t_burn >= 0 (got {dt}, {t_avg}, {t_burn})")
    rate = model.max_rate if model is not None else 0.0
    if dt * rate > STABILITY_LIMIT:
        raise DomainError(
            f"dt={dt:g} does not resolve the forcing rate {rate:g} (dt * rate must be <= {STABILITY_LIMIT})"
        )
    sample_every = sample_every or DEFAULT_SAMPLE_EVERY
    p_max = DEFAULT_P_MAX if p_max is None else p_max

    n_burn = int(round(t_burn / dt))
    n_avg = max(1, int(round(t_avg / dt)))
    half = 0.5 * dt
    m1_initial = ensemble.energy()

    def strang_step() -> None:
        forcing_step(ensemble, model, half)
        collision_step(ensemble, params, dt)
        forcing_step(ensemble, model, half)
        ensemble.advance(dt)

    milestone = max(1, n_burn // 10)
    for step in range(1, n_burn + 1):
        strang_step()
        if step % milestone == 0:
            logger.info(
                "Burn-in %3d%%: t=%.3g m1=%.5g", 100 * step // n_burn, ensemble.time, ensemble.energy()
            )

    ensemble.reset_stats()
    top = float(ensemble.speeds().max())
    edges = np.linspace(0.0, HIST_RANGE_FACTOR * top if top > 0 else 1.0, settings.HIST_BINS + 1)
    orders = np.arange(0.0, p_max + 0.25, 0.5)
    accumulator = MomentAccumulator(orders, edges, threads=ensemble.threads)
    m1_series: List[float] = []

    n_blocks = min(settings.JACKKNIFE_BLOCKS, n_avg)
    block_length = n_avg // n_blocks
    marks = [{"time": ensemble.time, "injected": 0.0, "dissipated": 0.0}]

    milestone = max(1, n_avg // 10)
    for step in range(1, n_avg + 1):
        strang_step()
        if step % sample_every == 0 or step == n_avg:
            accumulator.add(ensemble)
            m1_series.append(ensemble.energy())
        if step % block_length == 0 and len(marks) <= n_blocks:
            marks.append(
                {
                    "time": ensemble.time,
                    "injected": ensemble.stats["injected"],
                    "dissipated": ensemble.stats["dissipated"],
                }
            )
        if step % milestone == 0:
            logger.info(
                "Averaging %3d%%: t=%.3g m1=%.5g", 100 * step // n_avg, ensemble.time, ensemble.energy()
            )

    moments = empirical_moments(accumulator, orders)
    m1 = moments.as_dict()[1.0] if p_max >= 1.0 else ensemble.energy()

    rates = _block_rates(marks)
    residual = float(rates.mean()) if rates.size else 0.0
    residual_sigma = float(rates.std(ddof=1) / math.sqrt(rates.size)) if rates.size > 1 else 0.0
    balanced = _within_three_sigma(residual, residual_sigma, m1)

    drift, drift_sigma = _m1_drift(
        np.asarray(accumulator.times), np.asarray(m1_series), t_avg, settings.JACKKNIFE_BLOCKS
    )
    stationary = _within_three_sigma(drift, drift_sigma, m1)
    if not stationary:
        logger.warning(
            "m1 drifted by %.4g over the averaging window (3 sigma = %.4g); state may not be steady",
            drift,
            3.0 * drift_sigma,
        )

    accepted = ensemble.stats["accepted"]
    candidates = ensemble.stats["candidates"]
    overflow_fraction = ensemble.stats["overflow"] / accepted if accepted else 0.0

    histogram = accumulator.histogram()
    tail = None
    tail_error = None
    one_sided = model is not None and model.is_shear
    try:
        tail = fit_tail(histogram, moments=moments, seed=ensemble.seed, one_sided=one_sided)
    except InsufficientTailStatistics as exc:
        tail_error = str(exc)
        logger.warning("Tail fit skipped: %s", exc)

    diagnostics: Dict[str, Any] = {
        "steps_burn": n_burn,
        "steps_avg": n_avg,
        "snapshots": len(accumulator),
        "m1_initial": m1_initial,
        "m1_final": ensemble.energy(),
        "candidates": int(candidates),
        "accepted": int(accepted),
        "acceptance_rate": accepted / candidates if candidates else 0.0,
        "u_max": ensemble.u_max,
        "time": ensemble.time,
    }

    return SteadyStateReport(
        model=model,
        restitution=params,
        seed=ensemble.seed,
        n_particles=ensemble.n,
        threads=ensemble.threads,
        dt=dt,
        t_burn=t_burn,
        t_avg=t_avg,
        moments=moments,
        histogram=histogram,
        tail=tail,
        tail_error=tail_error,
        energy_residual=residual,
        energy_residual_sigma=residual_sigma,
        energy_balanced=balanced,
        stationary=stationary,
        m1_drift=drift,
        m1_drift_sigma=drift_sigma,
        overflow_fraction=overflow_fraction,
        recenter_drift_max=ensemble.stats["recenter_drift_max"],
        second_moment_tensor=accumulator.second_moment_tensor().tolist(),
        diagnostics=diagnostics,
    )


def simulate(
    config: ExperimentConfig,
    threads: int = 1,
    seed: Optional[int] = None,
    ensemble: Optional[ParticleEnsemble] = None,
) -> SteadyStateReport:
    """
    Run an ensemble to steady state with the config's model and dsmc block.

    The ensemble is drawn from the config (seed, N, temperature) unless one
    is passed in, in which case threads and seed are ignored.
    """
    block = config.dsmc
    if ensemble is None:
        ensemble = init_ensemble(
            block.n, block.temperature, config.seed if seed is None else seed, threads=threads
        )
    logger.info(
        "DSMC %s e=%g N=%d seed=%d threads=%d",
        config.model.kind.value,
        config.restitution,
        block.n,
        ensemble.seed,
        ensemble.threads,
    )
    return run_to_steady(
        ensemble,
        config.model,
        config.params,
        block.dt,
        block.t_burn,
        block.t_avg,
        sample_every=block.sample_every,
        p_max=block.p_max,
    )


def seed_sensitivity(reports: Sequence[SteadyStateReport]) -> Dict[str, Any]:
    """
    Compare steady m_1 across runs that differ only in their seed.

    Returns:
        Per-seed m_1, their spread and the largest pairwise z-score; the
        states are called consistent when no pair differs by more than 3 sigma
    """
    if len(reports) < 2:
        raise DomainError("Seed sensitivity needs at least two reports")
    values = []
    for report in reports:
        row = report.moments.get(1.0)
        if row is None:
            raise DomainError(f"Report for seed {report.seed} has no m_1")
        values.append((report.seed, row.m, row.stderr))

    worst = 0.0
    for (_, m_a, s_a), (_, m_b, s_b) in combinations(values, 2):
        spread = math.hypot(s_a, s_b)
        z = abs(m_a - m_b) / spread if spread > 0 else (0.0 if m_a == m_b else math.inf)
        worst = max(worst, z)

    m1 = np.array([m for _, m, _ in values])
    return {
        "seeds": [seed for seed, _, _ in values],
        "m1": m1.tolist(),
        "m1_spread": float(np.ptp(m1)),
        "max_z": worst,
        "consistent": worst <= 3.0,
    }
