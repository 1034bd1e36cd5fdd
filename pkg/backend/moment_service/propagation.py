"""
Interval propagation of steady-state moment bounds.

Starting from m_0 = 1 and a seed for m_1, the grid is narrowed by alternating
forward steps (steady balance at p bounds m_{p+1/2}), backward steps (friction
and diffusion bounds on lower orders) and the log-convexity closure, until the
intervals stop moving.
"""

import logging
import math
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln

from backend.moment_service.grid import (
    MomentGrid,
    Side,
    jensen_closure,
    largest_log_move,
)
from backend.moment_service.inequalities import (
    GammaTable,
    _balance_log_hi,
    _balance_log_lo,
    backward_log_upper,
    energy_balance_interval,
    forcing_parts,
    friction_log_lower,
    friction_seed_log_upper,
    log_max_product,
    log_sum,
)
from backend.moment_service.normalized import compute_surplus_constant
from backend.shared.config import settings, theory_constants
from backend.shared.exceptions import DomainError
from backend.shared.models import (
    ForcingKind,
    ForcingModel,
    PropagationConstants,
    RestitutionParams,
)


logger = logging.getLogger(__name__)

SeedInterval = Union[float, Tuple[float, float]]

# Extra orders propagated above p_max so the top entries see backward bounds
_GUARD_ORDERS = 1.0
_SWEEP_TOL = 1e-10


def start_order(eps: float) -> float:
    """Smallest half-integer p >= 1 + eps."""
    return math.ceil(2.0 * (1.0 + eps) - 1e-9) / 2.0


def _as_interval(seed: SeedInterval) -> Tuple[float, float]:
    if isinstance(seed, (int, float)):
        return float(seed), float(seed)
    lo, hi = seed
    return float(lo), float(hi)


class MomentPropagator:
    """Narrows one moment grid for a fixed forcing model and restitution."""

    def __init__(
        self,
        model: ForcingModel,
        params: RestitutionParams,
        p_max: float,
        eps: Optional[float] = None,
    ):
        self.model = model
        self.params = params
        self.p_max = p_max
        self.eps = settings.EPSILON if eps is None else eps
        self.p_start = start_order(self.eps)
        self.gammas = GammaTable(params)
        self.grid = MomentGrid(p_max + _GUARD_ORDERS)

    def seed(
        self,
        m1: Tuple[float, float],
        m_p0: Optional[Tuple[float, float, float]] = None,
    ) -> None:
        """
        Install m_1, m_{1/2}, an upper seed for m_{3/2} and an optional m_{p0}.

        Diffusion with friction caps m_{3/2} through its own dissipative balance;
        the other forcings through the upper end of the energy balance. The
        energy bracket itself is kept in diagnostics only.
        """
        m1_lo, m1_hi = m1
        grid = self.grid
        grid.seed_m1 = m1
        grid.set(1.0, m1_lo, m1_hi)
        grid.set(0.5, settings.M_HALF_FLOOR * math.sqrt(m1_lo), math.sqrt(m1_hi))
        for p in grid.p_values:
            grid.register(float(p))

        lo, hi = energy_balance_interval(self.model, self.params, grid)
        grid.diagnostics["energy_balance"] = (lo, hi)
        if self.model.kind == ForcingKind.DIFFUSION_FRICTION:
            log_hi = friction_seed_log_upper(grid, self.model, self.gammas)
            if log_hi is not None:
                grid.narrow_log(1.5, None, log_hi)
        elif hi > 0.0:
            grid.narrow(1.5, None, hi)
        if m_p0 is not None:
            p0, lo0, hi0 = m_p0
            grid.narrow(p0, lo0, hi0)
        jensen_closure(grid)
        if grid.log_value(1.5, Side.HI) == math.inf:
            logger.warning(
                "No upper seed for m_3/2 under %s; upper ends stay unbounded",
                self.model.kind.value,
            )

    def _friction_step(self, p: float) -> bool:
        """Both friction bounds on m_p, which only look one order up."""
        grid = self.grid
        moved = False
        bound = backward_log_upper(p, grid, self.model, self.gammas)
        if bound is not None:
            moved |= grid.narrow_log(p, None, bound[1])
        log_lo = friction_log_lower(p, grid, self.model)
        if log_lo is not None:
            moved |= grid.narrow_log(p, log_lo, None)
        return moved

    def forward(self) -> None:
        """Bound m_{p+1/2} from the steady balance at every p >= p_start."""
        grid = self.grid
        friction = self.model.kind == ForcingKind.DIFFUSION_FRICTION
        p = self.p_start
        while p + 0.5 <= grid.p_max + 1e-9:
            moved = self._friction_step(p) if friction else False
            log_hi = _balance_log_hi(p, grid, self.model, self.gammas)
            log_lo = None if self.model.is_shear else _balance_log_lo(p, grid, self.model)
            moved |= grid.narrow_log(p + 0.5, log_lo, log_hi)
            if moved:
                jensen_closure(grid)
            p += 0.5

    def backward(self) -> None:
        """Bounds on lower orders implied by the balance at higher ones."""
        grid = self.grid
        p = grid.p_max
        moved = False
        while p >= self.p_start - 1e-9:
            bound = backward_log_upper(p, grid, self.model, self.gammas)
            if bound is not None:
                index, log_hi = bound
                if index >= 1.5:
                    moved |= grid.narrow_log(index, None, log_hi)
            log_lo = friction_log_lower(p, grid, self.model)
            if log_lo is not None:
                moved |= grid.narrow_log(p, log_lo, None)
            p -= 0.5
        if moved:
            jensen_closure(grid)

    def record_step1(self) -> None:
        """Store the weaker bound K_eps (G_p + 2^{p+1} M_p) on m_{p+1/2} per p."""
        grid = self.grid
        k_eps = 1.0 / self.gammas.one_minus(1.0 + self.eps)
        step1: Dict[float, float] = {}
        p = self.p_start
        while p + 0.5 <= self.p_max + 1e-9:
            log_pos, _ = forcing_parts(self.model, p, grid, Side.HI)
            log_bound = math.log(k_eps) + log_sum(
                [log_pos, (p + 1.0) * math.log(2.0) + log_max_product(p, grid)]
            )
            step1[p + 0.5] = math.exp(log_bound)
            p += 0.5
        grid.diagnostics["step1_upper"] = step1

    def run(self) -> MomentGrid:
        grid = self.grid
        previous = (grid.log_lo.copy(), grid.log_hi.copy())
        sweeps = 0
        for sweep in range(1, settings.MAX_SWEEPS + 1):
            self.forward()
            self.backward()
            sweeps = sweep
            change = largest_log_move(previous[0], grid.log_lo, previous[1], grid.log_hi)
            logger.info(
                "Propagation sweep %d for %s: largest log change %.3e",
                sweep,
                self.model.kind.value,
                change,
            )
            if change < _SWEEP_TOL:
                break
            previous = (grid.log_lo.copy(), grid.log_hi.copy())

        self.record_step1()
        grid.diagnostics["sweeps"] = sweeps
        return self._truncated()

    def _energy_consistent(self) -> bool:
        """Whether the propagated m_{3/2} meets the energy-balance bracket."""
        bracket = self.grid.diagnostics.get("energy_balance")
        if bracket is None:
            return True
        lo, hi = self.grid.interval(1.5)
        return bool(lo <= bracket[1] * (1 + 1e-12) and bracket[0] <= hi * (1 + 1e-12))

    def _truncated(self) -> MomentGrid:
        size = int(round(2 * self.p_max)) + 1
        out = MomentGrid(self.p_max, seed_m1=self.grid.seed_m1)
        out.log_lo = self.grid.log_lo[:size].copy()
        out.log_hi = self.grid.log_hi[:size].copy()
        out.present = self.grid.present[:size].copy()
        out.diagnostics = {
            "sweeps": self.grid.diagnostics.get("sweeps", 0),
            "p_start": self.p_start,
            "eps": self.eps,
            "step1_upper": self.grid.diagnostics.get("step1_upper", {}),
            "energy_balance": self.grid.diagnostics.get("energy_balance"),
            "energy_consistent": self._energy_consistent(),
        }
        out.metadata = {
            "model": self.model.kind.value,
            "mu": repr(self.model.mu),
            "lambda": repr(self.model.lam),
            "kappa": repr(self.model.kappa),
            "e": repr(self.params.e),
            "m1_lo": repr(self.grid.seed_m1[0]) if self.grid.seed_m1 else "",
            "m1_hi": repr(self.grid.seed_m1[1]) if self.grid.seed_m1 else "",
            "one_sided": str(self.model.is_shear).lower(),
        }
        return out


def propagate(
    model: ForcingModel,
    params: RestitutionParams,
    m1: SeedInterval,
    p_max: float,
    m_p0: Optional[Tuple[float, float, float]] = None,
    eps: Optional[float] = None,
) -> MomentGrid:
    """
    Propagate steady-state moment intervals up to p_max.

    Args:
        model: Forcing model
        params: Restitution parameters
        m1: Second moment m_1 > 0, exact or as an interval (lo, hi)
        p_max: Half-integer top order
        m_p0: Optional extra seed (p0, lo, hi)
        eps: Recursion starts at the smallest half-integer >= 1 + eps

    Returns:
        Grid of intervals for p in {0, 1/2, ..., p_max}; shear grids carry
        meaningful upper ends only
    """
    m1_lo, m1_hi = _as_interval(m1)
    if m1_lo <= 0 or m1_hi < m1_lo:
        raise DomainError(f"m_1 seed must satisfy 0 < lo <= hi, got ({m1_lo}, {m1_hi})")
    if p_max < 1 or abs(2 * p_max - round(2 * p_max)) > 1e-12:
        raise DomainError(f"p_max must be a half-integer >= 1, got {p_max}")

    if p_max < 2:
        grid = MomentGrid(p_max, seed_m1=(m1_lo, m1_hi))
        grid.set(1.0, m1_lo, m1_hi)
        grid.set(0.5, settings.M_HALF_FLOOR * math.sqrt(m1_lo), math.sqrt(m1_hi))
        return jensen_closure(grid)

    propagator = MomentPropagator(model, params, p_max, eps=eps)
    propagator.seed((m1_lo, m1_hi), m_p0)
    return propagator.run()


def _ratio_constants(a: float, b: float, p_start: float) -> Tuple[float, float, float, float, float]:
    """c3, C3, C4/A, c5, C5 over p >= p_start."""
    p = np.concatenate([[p_start], np.geomspace(p_start, 1e6, 4000)])
    f3 = 2.0 * p * (2.0 * p + 1.0) / ((a * p - a + b) * (a * p + 1.0 - a + b))
    f3 = np.append(f3, 4.0 / a**2)
    f4_ends = [4.0 * (a * p_start + a / 2.0 + 2.0 * b - 1.0) / (p_start + 1.0), 4.0 * a]
    f5 = 2.0 * p / (a * p + b)
    return (
        float(f3.min()),
        float(f3.max()),
        float(max(f4_ends)),
        float(f5.min()),
        2.0 / a,
    )


def _p1_condition(
    model: ForcingModel, a: float, b: float, c4: float, k_eps: float, c5: float
):
    """Predicate on p for the start of the geometric induction."""

    def generic(p: float) -> bool:
        log_ratio = gammaln(a * p + a / 2.0 + 2.0 * b - 1.0) - gammaln(a * p + a / 2.0 + b)
        return math.log(c4 * k_eps) + log_ratio <= math.log(0.5)

    def friction(p: float) -> bool:
        log_ratio = gammaln(a * p + a / 2.0 + 2.0 * b - 1.0) - gammaln(a * p + b + 1.0)
        shift = gammaln(a * p + a / 2.0 + b) - gammaln(a * p + b + 1.0)
        return (
            math.log(c4) + log_ratio <= math.log(0.5 * c5 * model.lam) and shift <= 0.0
        )

    return friction if model.kind == ForcingKind.DIFFUSION_FRICTION else generic


def find_p1(condition, p_start: float, p_max: Optional[float] = None) -> Optional[float]:
    """
    Smallest half-integer p >= p_start satisfying a condition that holds for all large p.

    Scans a doubling ladder and bisects the last gap.
    """
    p_max = settings.P1_SCAN_MAX if p_max is None else p_max
    if condition(p_start):
        return p_start

    failing = p_start
    step = 0.5
    while True:
        candidate = p_start + step
        if candidate > p_max:
            return None
        if condition(candidate):
            break
        failing = candidate
        step *= 2.0

    lo, hi = failing, candidate
    while hi - lo > 0.5:
        mid = math.floor((lo + hi)) / 2.0
        if mid <= lo:
            mid = lo + 0.5
        if condition(mid):
            hi = mid
        else:
            lo = mid
    return hi


def propagation_constants(
    model: ForcingModel,
    params: RestitutionParams,
    a: Optional[float] = None,
    b: Optional[float] = None,
    eps: Optional[float] = None,
) -> PropagationConstants:
    """
    Constants of the geometric induction for one forcing model.

    Args:
        model: Forcing model; fixes the default a = 2/s
        params: Restitution parameters
        a, b: Normalization z_p = m_p / Gamma(ap + b)
        eps: Start offset, p >= 1 + eps

    Returns:
        PropagationConstants with p1 = None when the scan ends without success
    """
    a = theory_constants.tail_exponent(model.kind) if a is None else a
    b = theory_constants.default_b(a) if b is None else b
    eps = settings.EPSILON if eps is None else eps
    p_start = start_order(eps)

    gammas = GammaTable(params)
    k_eps = 1.0 / gammas.one_minus(1.0 + eps)
    surplus_constant = compute_surplus_constant(a, b)
    c3, big_c3, c4_unit, c5, big_c5 = _ratio_constants(a, b, p_start)
    c4 = surplus_constant * c4_unit

    condition = _p1_condition(model, a, b, c4, k_eps, c5)
    p1 = find_p1(condition, p_start)
    if p1 is None:
        logger.warning(
            "p1 not reached below %.3g for %s (a=%.4g, b=%.4g)",
            settings.P1_SCAN_MAX,
            model.kind.value,
            a,
            b,
        )

    return PropagationConstants(
        eps=eps,
        a=a,
        b=b,
        K_eps=k_eps,
        A_ab=surplus_constant,
        c3=c3,
        C3=big_c3,
        C4=c4,
        c5=c5,
        C5=big_c5,
        p1=p1,
    )
