"""
Half-integer moment grid with interval entries.

Each entry p in {0, 1/2, 1, ...} holds an interval [m_lo, m_hi] stored as log
values. Lower ends may be 0 (log -inf) and upper ends may be unbounded
(log +inf). Every update only narrows an interval.
"""

import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from backend.shared.config import settings
from backend.shared.exceptions import (
    DomainError,
    InfeasibleGridError,
    MissingMomentError,
)


logger = logging.getLogger(__name__)

# Relative slack before crossed endpoints count as an empty interval
_FEASIBILITY_SLACK = 1e-10
_ROUNDING_ULPS = 8.0 * np.finfo(float).eps
_LOG_FLOAT_MAX = float(np.log(np.finfo(float).max))


class Side(str, Enum):
    """Interval endpoint."""

    LO = "lo"
    HI = "hi"


def round_down(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Outward rounding of log lower bounds."""
    return x - _ROUNDING_ULPS * np.maximum(1.0, np.abs(x))


def round_up(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Outward rounding of log upper bounds."""
    return x + _ROUNDING_ULPS * np.maximum(1.0, np.abs(x))


def _log(value: float) -> float:
    if value < 0:
        raise DomainError(f"Moments are nonnegative, got {value}")
    return -math.inf if value == 0 else math.log(value)


def _exp(log_value: float) -> float:
    """exp that saturates to inf past the float range."""
    return math.inf if log_value > _LOG_FLOAT_MAX else math.exp(log_value)


class MomentGrid:
    """Intervals for m_p on the half-integer grid 0, 1/2, ..., p_max."""

    step = 0.5

    def __init__(self, p_max: float, seed_m1: Optional[Tuple[float, float]] = None):
        if p_max < 0 or abs(2 * p_max - round(2 * p_max)) > 1e-12:
            raise DomainError(f"p_max must be a nonnegative half-integer, got {p_max}")
        size = int(round(2 * p_max)) + 1
        self.p_max = float(p_max)
        self.log_lo = np.full(size, -np.inf)
        self.log_hi = np.full(size, np.inf)
        self.present = np.zeros(size, dtype=bool)
        self.seed_m1 = seed_m1
        self.metadata: Dict[str, str] = {}
        self.diagnostics: Dict[str, Any] = {}
        self.set(0.0, 1.0, 1.0)

    @classmethod
    def from_intervals(
        cls,
        entries: Dict[float, Tuple[float, float]],
        seed_m1: Optional[Tuple[float, float]] = None,
    ) -> "MomentGrid":
        """Build a grid holding exactly the given entries (m_0 = 1 is added)."""
        p_max = max(list(entries.keys()) + [0.0])
        grid = cls(p_max, seed_m1=seed_m1)
        for p, (lo, hi) in entries.items():
            if p == 0:
                continue
            grid.set(p, lo, hi)
        return grid

    @classmethod
    def from_values(cls, values: Dict[float, float]) -> "MomentGrid":
        """Degenerate intervals [m_p, m_p]."""
        return cls.from_intervals({p: (m, m) for p, m in values.items()})

    @property
    def p_values(self) -> np.ndarray:
        return np.arange(self.log_lo.size) * self.step

    @property
    def present_p(self) -> List[float]:
        return [float(p) for p in self.p_values[self.present]]

    def index(self, p: float) -> Optional[int]:
        """Array index of p, or None when p is off the grid."""
        k = 2.0 * p
        if abs(k - round(k)) > 1e-9:
            return None
        idx = int(round(k))
        if idx < 0 or idx >= self.log_lo.size:
            return None
        return idx

    def has(self, p: float) -> bool:
        idx = self.index(p)
        return idx is not None and bool(self.present[idx])

    def require(self, ps: Iterable[float]) -> None:
        """Raise MissingMomentError listing every absent p."""
        missing = [p for p in ps if not self.has(p)]
        if missing:
            raise MissingMomentError(missing)

    def log_value(self, p: float, side: Side) -> float:
        self.require([p])
        idx = self.index(p)
        assert idx is not None
        return float(self.log_lo[idx] if side == Side.LO else self.log_hi[idx])

    def value(self, p: float, side: Side) -> float:
        return _exp(self.log_value(p, side))

    def interval(self, p: float) -> Tuple[float, float]:
        return self.value(p, Side.LO), self.value(p, Side.HI)

    def register(self, p: float) -> None:
        """Add p with the trivial interval [0, inf) if absent."""
        idx = self._checked_index(p)
        self.present[idx] = True

    def set(self, p: float, lo: float, hi: float) -> None:
        """Store [lo, hi] at p, replacing any previous interval."""
        idx = self._checked_index(p)
        log_lo, log_hi = _log(lo), (math.inf if math.isinf(hi) else _log(hi))
        if log_lo > log_hi:
            raise InfeasibleGridError(p, lo, hi, "lower end above upper end")
        self.log_lo[idx] = log_lo
        self.log_hi[idx] = log_hi
        self.present[idx] = True

    def narrow(self, p: float, lo: Optional[float] = None, hi: Optional[float] = None) -> bool:
        """Intersect the entry at p with [lo, hi]."""
        return self.narrow_log(
            p,
            None if lo is None else _log(lo),
            None if hi is None else (math.inf if math.isinf(hi) else _log(hi)),
        )

    def narrow_log(
        self,
        p: float,
        log_lo: Optional[float] = None,
        log_hi: Optional[float] = None,
    ) -> bool:
        """
        Intersect the entry at p with [exp(log_lo), exp(log_hi)].

        Returns:
            True when either endpoint moved
        """
        idx = self._checked_index(p)
        self.present[idx] = True
        old_lo, old_hi = self.log_lo[idx], self.log_hi[idx]
        new_lo = old_lo if log_lo is None or np.isnan(log_lo) else max(old_lo, log_lo)
        new_hi = old_hi if log_hi is None or np.isnan(log_hi) else min(old_hi, log_hi)
        new_lo, new_hi = self._check_feasible(p, new_lo, new_hi)
        self.log_lo[idx], self.log_hi[idx] = new_lo, new_hi
        return bool(new_lo != old_lo or new_hi != old_hi)

    def _check_feasible(self, p: float, lo: float, hi: float) -> Tuple[float, float]:
        if lo <= hi:
            return lo, hi
        if lo - hi <= _FEASIBILITY_SLACK * max(1.0, abs(hi)):
            return hi, hi
        raise InfeasibleGridError(p, _exp(lo), _exp(hi))

    def _checked_index(self, p: float) -> int:
        idx = self.index(p)
        if idx is None:
            raise DomainError(f"p = {p} is not a half-integer in [0, {self.p_max}]")
        return idx

    def copy(self) -> "MomentGrid":
        clone = MomentGrid(self.p_max, seed_m1=self.seed_m1)
        clone.log_lo = self.log_lo.copy()
        clone.log_hi = self.log_hi.copy()
        clone.present = self.present.copy()
        clone.metadata = dict(self.metadata)
        clone.diagnostics = dict(self.diagnostics)
        return clone

    def to_frame(self) -> pd.DataFrame:
        """Present entries as columns p, m_lo, m_hi."""
        mask = self.present
        return pd.DataFrame(
            {
                "p": self.p_values[mask],
                "m_lo": np.exp(self.log_lo[mask]),
                "m_hi": np.exp(self.log_hi[mask]),
            }
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write the grid with its metadata as leading '# key: value' lines."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for key, value in sorted(self.metadata.items()):
                handle.write(f"# {key}: {value}\n")
            self.to_frame().to_csv(handle, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "MomentGrid":
        path = Path(path)
        metadata: Dict[str, str] = {}
        with path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].partition(":")
                metadata[key.strip()] = value.strip()

        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
        entries = {
            float(row.p): (float(row.m_lo), float(row.m_hi))
            for row in frame.itertuples(index=False)
        }
        grid = cls.from_intervals(entries)
        grid.metadata = metadata
        return grid

    def __len__(self) -> int:
        return int(self.present.sum())

    def __repr__(self) -> str:
        return f"MomentGrid(p_max={self.p_max}, entries={len(self)})"


def jensen_closure(grid: MomentGrid) -> MomentGrid:
    """
    Narrow every interval to the log-convexity fixed point.

    For present p_i < p_j < p_k with theta = (p_k - p_j)/(p_k - p_i):
    log m_j <= theta log m_i + (1 - theta) log m_k, used as an upper bound on the
    middle entry and a lower bound on each end. With p_i = 0 this is the
    power-mean inequality (m_{p'})^{1/p'} <= (m_p)^{1/p}.

    Args:
        grid: Grid to narrow in place; must hold m_0

    Returns:
        The same grid
    """
    grid.require([0.0])
    idx = np.flatnonzero(grid.present)
    if idx.size < 3:
        return grid

    p = grid.p_values[idx]
    p_i, p_j, p_k = p[:, None, None], p[None, :, None], p[None, None, :]
    valid = (p_i < p_j) & (p_j < p_k)
    span = np.where(valid, p_k - p_i, 1.0)
    theta = np.where(valid, (p_k - p_j) / span, 0.5)

    lo = grid.log_lo[idx].copy()
    hi = grid.log_hi[idx].copy()

    converged = False
    for iteration in range(settings.CLOSURE_MAX_ITER):
        with np.errstate(invalid="ignore"):
            h_i, h_k = hi[:, None, None], hi[None, None, :]
            l_j = lo[None, :, None]

            mid_hi = np.where(valid, theta * h_i + (1.0 - theta) * h_k, np.inf)
            end_lo_k = np.where(valid, (l_j - theta * h_i) / (1.0 - theta), -np.inf)
            end_lo_i = np.where(valid, (l_j - (1.0 - theta) * h_k) / theta, -np.inf)

        cand_hi = np.nan_to_num(mid_hi.min(axis=(0, 2)), nan=np.inf)
        cand_lo = np.maximum(
            np.nan_to_num(end_lo_k.max(axis=(0, 1)), nan=-np.inf),
            np.nan_to_num(end_lo_i.max(axis=(1, 2)), nan=-np.inf),
        )

        new_hi = np.minimum(hi, round_up(cand_hi))
        new_lo = np.maximum(lo, round_down(cand_lo))
        new_lo[0], new_hi[0] = 0.0, 0.0

        for n in np.flatnonzero(new_lo > new_hi):
            new_lo[n], new_hi[n] = grid._check_feasible(float(p[n]), new_lo[n], new_hi[n])

        change = largest_log_move(lo, new_lo, hi, new_hi)
        lo, hi = new_lo, new_hi
        if change <= settings.CLOSURE_TOL:
            converged = True
            break

    if not converged:
        logger.debug("Closure stopped after %d iterations", settings.CLOSURE_MAX_ITER)

    grid.log_lo[idx] = lo
    grid.log_hi[idx] = hi
    return grid


def largest_log_move(lo: np.ndarray, new_lo: np.ndarray, hi: np.ndarray, new_hi: np.ndarray) -> float:
    """Largest endpoint move in log space; inf when an endpoint left or entered infinity."""
    changes = [0.0]
    for old, new in ((lo, new_lo), (hi, new_hi)):
        moved = old != new
        if not np.any(moved):
            continue
        finite = moved & np.isfinite(old) & np.isfinite(new)
        if np.any(moved & ~finite):
            return math.inf
        changes.append(float(np.max(np.abs(new[finite] - old[finite]))))
    return max(changes)
