"""
Moment inequalities of the steady balance G_p + Q_p = 0.

Collision moments are bracketed by -m_{p+1/2} <= Q_p <= -(1-gamma_p) m_{p+1/2}
+ gamma_p S_p, forcing moments G_p are exact linear functionals of the grid
(upper bound only for shear), and together they bound m_{p+1/2}. Everything is
evaluated in log space; public helpers return plain floats.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import binom, logsumexp

from backend.combinatorics_service.binomial import split_index
from backend.kernel_service.povzner import gamma_p
from backend.moment_service.grid import MomentGrid, Side
from backend.shared.exceptions import (
    DomainError,
    GammaDegenerateError,
    ShearLowerBoundUnavailable,
)
from backend.shared.models import ForcingKind, ForcingModel, RestitutionParams


logger = logging.getLogger(__name__)

# Below this 1 - gamma_p the steady balance cannot be inverted
GAMMA_DEGENERACY = 1e-12
_LOG_FLOAT_MAX = float(np.log(np.finfo(float).max))


class GammaTable:
    """Memo of gamma_p for one restitution parameter, local to a computation."""

    def __init__(self, params: RestitutionParams):
        self.params = params
        self._values: Dict[float, float] = {}

    def __call__(self, p: float) -> float:
        if p not in self._values:
            self._values[p] = gamma_p(self.params, p).value
        return self._values[p]

    def one_minus(self, p: float) -> float:
        """1 - gamma_p, raising when it is numerically zero."""
        gap = 1.0 - self(p)
        if gap < GAMMA_DEGENERACY:
            raise GammaDegenerateError(
                f"1 - gamma_p = {gap:.3e} at p = {p:g}; the balance needs p > 1"
            )
        return gap


def log_sum(terms: Sequence[float]) -> float:
    """log(sum exp(terms)) with -inf terms dropped and +inf propagated."""
    values = np.asarray(terms, dtype=float)
    if values.size == 0 or np.all(values == -np.inf):
        return -math.inf
    if np.any(values == np.inf):
        return math.inf
    return float(logsumexp(values[values > -np.inf]))


def log_sub(log_a: float, log_b: float) -> float:
    """log(exp(log_a) - exp(log_b)), or -inf when the difference is not positive."""
    if log_b == -math.inf:
        return log_a
    if log_a == math.inf:
        return math.inf
    if log_a <= log_b:
        return -math.inf
    return log_a + math.log(-math.expm1(log_b - log_a))


def _signed(log_pos: float, log_neg: float) -> float:
    """exp(log_pos) - exp(log_neg) as a float."""
    return math.exp(log_pos) - math.exp(log_neg)


def _surplus_indices(p: float) -> List[Tuple[int, float, float, float, float]]:
    return [
        (k, k + 0.5, p - k, float(k), p - k + 0.5)
        for k in range(1, split_index(p) + 1)
    ]


def _check_order(p: float) -> None:
    if p <= 1.0:
        raise DomainError(f"Collision moment bounds need p > 1, got {p}")


def log_surplus(p: float, grid: MomentGrid, side: Side) -> float:
    """log S_p with every moment taken at the given interval side."""
    _check_order(p)
    terms = _surplus_indices(p)
    grid.require(sorted({q for _, *qs in terms for q in qs}))

    logs = []
    for k, q1, q2, q3, q4 in terms:
        log_coeff = math.log(binom(p, k))
        logs.append(log_coeff + grid.log_value(q1, side) + grid.log_value(q2, side))
        logs.append(log_coeff + grid.log_value(q3, side) + grid.log_value(q4, side))
    return log_sum(logs)


def surplus(p: float, grid: MomentGrid, side: Side) -> float:
    """
    Surplus S_p = sum_{k=1}^{k_p} C(p,k) (m_{k+1/2} m_{p-k} + m_k m_{p-k+1/2}).

    Args:
        p: Order > 1
        grid: Moment grid holding every index up to p - 1/2 (p itself at p = 3/2)
        side: Interval endpoint used for each moment

    Returns:
        S_p evaluated on that side
    """
    return math.exp(log_surplus(p, grid, side))


def log_max_product(p: float, grid: MomentGrid, side: Side = Side.HI) -> float:
    """log M_p = log max_k {m_{k+1/2} m_{p-k}, m_k m_{p-k+1/2}}."""
    _check_order(p)
    best = -math.inf
    for _, q1, q2, q3, q4 in _surplus_indices(p):
        best = max(
            best,
            grid.log_value(q1, side) + grid.log_value(q2, side),
            grid.log_value(q3, side) + grid.log_value(q4, side),
        )
    return best


def collision_moment_interval(
    p: float,
    grid: MomentGrid,
    params: RestitutionParams,
    gammas: Optional[GammaTable] = None,
) -> Tuple[float, float]:
    """
    Interval for the collision moment Q_p.

    Returns:
        (-m_{p+1/2}^hi, -(1 - gamma_p) m_{p+1/2}^lo + gamma_p S_p^hi)
    """
    _check_order(p)
    gammas = gammas or GammaTable(params)
    grid.require([p + 0.5])
    gamma = gammas(p)
    lower = -grid.value(p + 0.5, Side.HI)
    upper = gamma * surplus(p, grid, Side.HI) - (1.0 - gamma) * grid.value(p + 0.5, Side.LO)
    return lower, upper


def forcing_parts(
    model: ForcingModel, p: float, grid: MomentGrid, side: Side
) -> Tuple[float, float]:
    """
    Split G_p at one side into logs of its positive and negative parts.

    Returns:
        (log_pos, log_neg) with G_p = exp(log_pos) - exp(log_neg)
    """
    if p == 0:
        return -math.inf, -math.inf
    if p < 0:
        raise DomainError(f"Moment order must be nonnegative, got {p}")
    other = Side.HI if side == Side.LO else Side.LO

    if model.kind == ForcingKind.SHEAR_FLOW and side == Side.LO:
        raise ShearLowerBoundUnavailable(
            "Shear forcing only bounds G_p from above: G_p <= 2 kappa p m_p"
        )

    if model.kind in (ForcingKind.NEGATIVE_FRICTION, ForcingKind.SHEAR_FLOW):
        return math.log(2.0 * model.kappa * p) + grid.log_value(p, side), -math.inf

    if p < 1.0:
        raise DomainError(f"Diffusion moments need p >= 1, got {p}")
    log_diffusion = math.log(2.0 * model.mu * p * (2.0 * p + 1.0)) + grid.log_value(p - 1.0, side)
    if model.kind == ForcingKind.PURE_DIFFUSION:
        return log_diffusion, -math.inf

    log_friction = math.log(2.0 * model.lam * p) + grid.log_value(p, other)
    return log_diffusion, log_friction


def forcing_moment(model: ForcingModel, p: float, grid: MomentGrid, side: Side) -> float:
    """
    Forcing moment G_p at one side of the grid intervals.

    PureDiffusion: 2 mu p (2p+1) m_{p-1}
    DiffusionFriction: -2 lambda p m_p + 2 mu p (2p+1) m_{p-1}
    NegativeFriction: 2 kappa p m_p
    ShearFlow: upper bound 2 kappa p m_p only
    """
    log_pos, log_neg = forcing_parts(model, p, grid, side)
    return _signed(log_pos, log_neg)


def _balance_log_hi(
    p: float, grid: MomentGrid, model: ForcingModel, gammas: GammaTable
) -> float:
    """log of (G_p^hi + gamma_p S_p^hi) / (1 - gamma_p)."""
    gap = gammas.one_minus(p)
    log_pos, log_neg = forcing_parts(model, p, grid, Side.HI)
    log_gain = math.log(gammas(p)) + log_surplus(p, grid, Side.HI)
    return log_sub(log_sum([log_pos, log_gain]), log_neg) - math.log(gap)


def _balance_log_lo(p: float, grid: MomentGrid, model: ForcingModel) -> float:
    """log of max(G_p^lo, 0)."""
    log_pos, log_neg = forcing_parts(model, p, grid, Side.LO)
    return log_sub(log_pos, log_neg)


def steady_balance_bound(
    p: float,
    grid: MomentGrid,
    model: ForcingModel,
    params: RestitutionParams,
    side: Side,
    gammas: Optional[GammaTable] = None,
) -> float:
    """
    One endpoint of G_p <= m_{p+1/2} <= (G_p + gamma_p S_p) / (1 - gamma_p).

    Raises:
        ShearLowerBoundUnavailable: lower side requested for shear forcing
        GammaDegenerateError: 1 - gamma_p below 1e-12
    """
    _check_order(p)
    gammas = gammas or GammaTable(params)
    if side == Side.LO:
        return math.exp(_balance_log_lo(p, grid, model))
    return math.exp(_balance_log_hi(p, grid, model, gammas))


def steady_balance_interval(
    p: float,
    grid: MomentGrid,
    model: ForcingModel,
    params: RestitutionParams,
    gammas: Optional[GammaTable] = None,
) -> Tuple[float, float]:
    """
    Interval for m_{p+1/2} implied by the steady balance at order p.

    For shear the lower end is whatever the grid already holds at p + 1/2.
    """
    gammas = gammas or GammaTable(params)
    upper = steady_balance_bound(p, grid, model, params, Side.HI, gammas)
    if model.is_shear:
        lower = grid.value(p + 0.5, Side.LO) if grid.has(p + 0.5) else 0.0
    else:
        lower = steady_balance_bound(p, grid, model, params, Side.LO, gammas)
    return lower, upper


def energy_balance_interval(
    model: ForcingModel, params: RestitutionParams, grid: MomentGrid
) -> Tuple[float, float]:
    """
    Bracket m_{3/2} from the energy balance G_1 = beta(1-beta)/2 <<|u|^3>>.

    Zero mean gives m_{3/2} <= <<|u|^3>> <= 8 m_{3/2}, hence
    G_1 / (4 beta (1-beta)) <= m_{3/2} <= 2 G_1 / (beta (1-beta)).

    Returns:
        (lo, hi); (0, inf) in the elastic case where the balance carries no
        information, (0, 0) when the forcing cannot balance cooling at this m_1
    """
    beta = params.beta
    dissipation = beta * (1.0 - beta)
    if dissipation <= 0.0:
        return 0.0, math.inf

    upper_g = forcing_moment(model, 1.0, grid, Side.HI)
    if upper_g <= 0.0:
        return 0.0, 0.0

    lower = 0.0
    if not model.is_shear:
        lower = max(forcing_moment(model, 1.0, grid, Side.LO), 0.0) / (4.0 * dissipation)
    return lower, 2.0 * upper_g / dissipation


def friction_seed_log_upper(
    grid: MomentGrid, model: ForcingModel, gammas: GammaTable
) -> Optional[float]:
    """
    Upper bound on m_{3/2} from the friction balance at p = 3/2.

    S_{3/2} = (3/2)(m_{3/2} m_{1/2} + m_1^2) holds m_{3/2} itself, so
    3 lambda m_{3/2} <= D + gamma (3/2)(m_{3/2} m_{1/2} + m_1^2) is solved for m_{3/2}.

    Returns:
        log bound, or None when the friction rate cannot absorb the surplus
    """
    if model.kind != ForcingKind.DIFFUSION_FRICTION:
        return None
    p = 1.5
    gamma = gammas(p)
    log_half = grid.log_value(0.5, Side.HI)
    rate = 2.0 * model.lam * p - gamma * p * math.exp(min(log_half, _LOG_FLOAT_MAX))
    if rate <= 0.0:
        return None
    log_d = math.log(2.0 * model.mu * p * (2.0 * p + 1.0)) + log_half
    log_gain = math.log(gamma * p) + 2.0 * grid.log_value(1.0, Side.HI)
    return log_sum([log_d, log_gain]) - math.log(rate)


def backward_log_upper(
    p: float, grid: MomentGrid, model: ForcingModel, gammas: GammaTable
) -> Optional[Tuple[float, float]]:
    """
    Upper bound on a lower-order moment from the steady balance at p.

    Returns:
        (index, log bound) or None when the model gives no such bound
    """
    if model.kind == ForcingKind.NEGATIVE_FRICTION:
        if not grid.has(p + 0.5):
            return None
        # 2 kappa p m_p = G_p <= m_{p+1/2}
        return p, grid.log_value(p + 0.5, Side.HI) - math.log(2.0 * model.kappa * p)

    if model.kind == ForcingKind.PURE_DIFFUSION:
        if not grid.has(p + 0.5):
            return None
        coeff = 2.0 * model.mu * p * (2.0 * p + 1.0)
        return p - 1.0, grid.log_value(p + 0.5, Side.HI) - math.log(coeff)

    if model.kind == ForcingKind.DIFFUSION_FRICTION:
        # 2 lambda p m_p <= D + gamma_p S_p - (1 - gamma_p) m_{p+1/2}
        gap = gammas.one_minus(p)
        log_d = math.log(2.0 * model.mu * p * (2.0 * p + 1.0)) + grid.log_value(p - 1.0, Side.HI)
        log_gain = math.log(gammas(p)) + log_surplus(p, grid, Side.HI)
        log_loss = -math.inf
        if grid.has(p + 0.5):
            log_loss = math.log(gap) + grid.log_value(p + 0.5, Side.LO)
        log_rhs = log_sub(log_sum([log_d, log_gain]), log_loss)
        return p, log_rhs - math.log(2.0 * model.lam * p)

    return None


def friction_log_lower(p: float, grid: MomentGrid, model: ForcingModel) -> Optional[float]:
    """
    Lower bound on m_p under diffusion with friction.

    From D - 2 lambda p m_p <= m_{p+1/2} <= sqrt(m_p H) with D = 2 mu p (2p+1) m_{p-1}
    and H = m_{p+1}: sqrt(m_p) is at least the positive root of
    2 lambda p y^2 + sqrt(H) y - D = 0.
    """
    if model.kind != ForcingKind.DIFFUSION_FRICTION:
        return None
    log_d = math.log(2.0 * model.mu * p * (2.0 * p + 1.0)) + grid.log_value(p - 1.0, Side.LO)
    if log_d == -math.inf:
        return None
    log_rate = math.log(2.0 * model.lam * p)

    log_h = grid.log_value(p + 1.0, Side.HI) if grid.has(p + 1.0) else math.inf
    if log_h < math.inf:
        # y = 2D / (sqrt(H) + sqrt(H + 8 lambda p D))
        log_disc = 0.5 * np.logaddexp(log_h, math.log(4.0) + log_rate + log_d)
        log_y = math.log(2.0) + log_d - float(np.logaddexp(0.5 * log_h, log_disc))
        return 2.0 * log_y

    if grid.has(p + 0.5):
        return log_sub(log_d, grid.log_value(p + 0.5, Side.HI)) - log_rate
    return None
