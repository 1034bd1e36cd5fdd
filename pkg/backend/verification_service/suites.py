"""
Randomized verification suites for the kernel, binomial and moment machinery.

Each suite draws its cases from a seeded generator, checks one family of
inequalities and reports trials, violations and the worst margin (negative
when something failed).
"""

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.combinatorics_service.binomial import binom_sandwich
from backend.kernel_service.povzner import (
    a_plus_moment,
    a_plus_via_omega,
    discrete_collision_moment,
    gamma_closed_form,
    gamma_p,
)
from backend.moment_service.grid import MomentGrid, Side, jensen_closure
from backend.moment_service.inequalities import (
    GammaTable,
    collision_moment_interval,
    log_surplus,
)
from backend.moment_service.normalized import normalize, surplus_normalized_bound
from backend.shared.config import theory_constants
from backend.shared.exceptions import DomainError
from backend.shared.models import RestitutionParams, SuiteResult


logger = logging.getLogger(__name__)

_MAX_FAILURES = 10


class _Tally:
    """Running count of trials, violations and the smallest margin."""

    def __init__(self, name: str, seed: int):
        self.name = name
        self.seed = seed
        self.trials = 0
        self.violations = 0
        self.worst = math.inf
        self.failures: List[str] = []

    def check(self, margin: float, describe: Callable[[], str]) -> None:
        self.trials += 1
        self.worst = min(self.worst, margin)
        if margin < 0 or math.isnan(margin):
            self.violations += 1
            if len(self.failures) < _MAX_FAILURES:
                self.failures.append(describe())

    def result(self) -> SuiteResult:
        return SuiteResult(
            suite=self.name,
            trials=self.trials,
            violations=self.violations,
            worst_margin=self.worst if self.trials else 0.0,
            seed=self.seed,
            failures=self.failures,
        )


def _random_atoms(rng: np.random.Generator, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """k atoms with Dirichlet weights, shifted to zero mean."""
    weights = rng.dirichlet(np.ones(k))
    atoms = rng.normal(0.0, 1.0, size=(k, 3))
    atoms -= weights @ atoms
    return atoms, weights


def _atom_moments(atoms: np.ndarray, weights: np.ndarray, p_max: float) -> Dict[float, float]:
    sq = np.einsum("ij,ij->i", atoms, atoms)
    return {
        float(p): float(weights @ sq**p) for p in np.arange(0.5, p_max + 0.25, 0.5)
    }


class GammaSuite:
    """Closed forms, normalization, monotonicity and bounds of gamma_p."""

    name = "gamma"

    def __init__(self, n_beta: int = 48, p_values: Optional[Sequence[float]] = None):
        self.betas = np.linspace(0.5, 1.0, n_beta)
        self.p_values = np.arange(1.0, 20.25, 0.5) if p_values is None else np.asarray(p_values)

    def run(self, trials: int, rng: np.random.Generator, seed: int) -> SuiteResult:
        tally = _Tally(self.name, seed)
        for beta in self.betas:
            params = RestitutionParams.from_beta(float(beta))
            values = [gamma_p(params, float(p), use_closed_form=False).value for p in self.p_values]

            tally.check(1e-10 - abs(values[0] - 1.0), lambda: f"gamma_1 != 1 at beta={beta:.4f}")
            for p, value, following in zip(self.p_values, values, values[1:] + [None]):
                exact = gamma_closed_form(float(beta), float(p))
                if exact is not None:
                    tally.check(
                        1e-10 - abs(value - exact),
                        lambda: f"closed form mismatch at beta={beta}, p={p}: {value} vs {exact}",
                    )
                if p > 1.0:
                    bound = min(1.0 - 1e-12, 4.0 / (p + 1.0))
                    tally.check(bound - value, lambda: f"gamma_{p:g}={value} above {bound} at beta={beta:.4f}")
                if following is not None:
                    tally.check(value - following, lambda: f"gamma not decreasing after p={p:g} at beta={beta:.4f}")
        return tally.result()


class PovznerSuite:
    """A+ <= gamma_p (|v|^2 + |w|^2)^p and agreement of the two sphere parametrizations."""

    name = "povzner"

    def run(self, trials: int, rng: np.random.Generator, seed: int) -> SuiteResult:
        tally = _Tally(self.name, seed)
        for _ in range(trials):
            v = rng.normal(0.0, 1.0, 3)
            w = rng.normal(0.0, 1.0, 3)
            beta = float(rng.uniform(0.5, 1.0))
            p = float(rng.uniform(1.0, 10.0))
            params = RestitutionParams.from_beta(beta)

            gain = a_plus_moment(v, w, params, p)
            energy = float(v @ v + w @ w)
            rhs = gamma_p(params, p).value * energy**p
            tally.check(
                rhs + 1e-8 * max(1.0, rhs) - gain,
                lambda: f"Povzner bound fails: beta={beta:.4f} p={p:.3f} A+={gain} rhs={rhs}",
            )
            other = a_plus_via_omega(v, w, params, p)
            tally.check(
                1e-8 * max(abs(gain), 1e-300) - abs(gain - other),
                lambda: f"sigma/omega mismatch: beta={beta:.4f} p={p:.3f} {gain} vs {other}",
            )
        return tally.result()


class BinomialSuite:
    """lower <= middle <= upper, with equality lower == middle at odd integers."""

    name = "binomial"
    slack = 1e-12

    def run(self, trials: int, rng: np.random.Generator, seed: int) -> SuiteResult:
        tally = _Tally(self.name, seed)
        odd = np.arange(3, 26, 2)
        for trial in range(trials):
            p = float(rng.choice(odd)) if trial % 10 == 0 else float(rng.uniform(1.0, 25.0))
            if p <= 1.0:
                continue
            x, y = np.exp(rng.uniform(-3.0, 3.0, 2) * math.log(10.0))
            bounds = binom_sandwich(p, float(x), float(y))
            scale = max(abs(bounds.middle), 1e-300)
            tally.check(
                bounds.middle * (1 + self.slack) - bounds.lower,
                lambda: f"lower > middle at p={p}, x={x}, y={y}",
            )
            tally.check(
                bounds.upper * (1 + self.slack) - bounds.middle,
                lambda: f"middle > upper at p={p}, x={x}, y={y}",
            )
            if p in odd:
                tally.check(
                    self.slack - abs(bounds.lower - bounds.middle) / scale,
                    lambda: f"lower != middle at odd p={p}",
                )
        return tally.result()


class CollisionBoundSuite:
    """Exact Q_p of small discrete ensembles inside collision_moment_interval."""

    name = "collision"
    betas = (0.55, 0.75, 0.95)
    orders = tuple(np.arange(1.5, 6.25, 0.5))

    def run(self, trials: int, rng: np.random.Generator, seed: int) -> SuiteResult:
        tally = _Tally(self.name, seed)
        tables = {beta: GammaTable(RestitutionParams.from_beta(beta)) for beta in self.betas}
        for _ in range(trials):
            atoms, weights = _random_atoms(rng, int(rng.integers(2, 7)))
            grid = MomentGrid.from_values(_atom_moments(atoms, weights, max(self.orders) + 0.5))
            for beta in self.betas:
                params = RestitutionParams.from_beta(beta)
                for p in self.orders:
                    exact = discrete_collision_moment(atoms, weights, params, float(p))
                    lo, hi = collision_moment_interval(float(p), grid, params, tables[beta])
                    tol = 1e-8 * max(1.0, abs(lo), abs(hi))
                    tally.check(
                        min(exact - lo, hi - exact) + tol,
                        lambda: f"Q_{p:g}={exact} outside [{lo}, {hi}] at beta={beta}",
                    )
        return tally.result()


class SurplusSuite:
    """Direct S_p against A(a,b) Gamma(ap + a/2 + 2b) Z_p on random tables."""

    name = "surplus"
    # a is drawn from a fixed ladder so A(a, b) is computed once per value
    a_ladder = tuple(np.round(np.linspace(1.0, 2.0, 11), 10))
    p_max = 10.0

    def run(self, trials: int, rng: np.random.Generator, seed: int) -> SuiteResult:
        tally = _Tally(self.name, seed)
        ps = np.arange(0.5, self.p_max + 0.75, 0.5)
        for _ in range(trials):
            a = float(rng.choice(self.a_ladder))
            b = theory_constants.default_b(a)
            log_q = rng.uniform(-2.0, 2.0)
            noise = rng.uniform(-3.0, 3.0, ps.size)
            # m_p = z_p Gamma(ap + b) with z_p = q^p e^{noise}
            from_z = {
                float(p): math.exp(log_q * p + eps + math.lgamma(a * p + b))
                for p, eps in zip(ps, noise)
            }
            grid = MomentGrid.from_values(from_z)
            z = normalize(grid, a, b)
            p = float(rng.choice(ps[(ps > 1.0) & (ps <= self.p_max)]))
            direct = log_surplus(p, grid, Side.HI)
            bound = math.log(surplus_normalized_bound(p, z))
            tally.check(
                bound - direct + 1e-9 * max(1.0, abs(bound)),
                lambda: f"S_{p:g} above bound at a={a}, b={b}: log {direct} > {bound}",
            )
        return tally.result()


class ClosureSuite:
    """Jensen closure keeps the true moments of random ensembles and only narrows."""

    name = "closure"
    p_max = 6.0

    def run(self, trials: int, rng: np.random.Generator, seed: int) -> SuiteResult:
        tally = _Tally(self.name, seed)
        for _ in range(trials):
            atoms, weights = _random_atoms(rng, int(rng.integers(2, 7)))
            truth = _atom_moments(atoms, weights, self.p_max)
            entries = {}
            for p, m in truth.items():
                if rng.random() < 0.3:
                    entries[p] = (0.0, math.inf)
                else:
                    widen = np.exp(rng.uniform(0.0, 1.0, 2))
                    entries[p] = (m / widen[0], m * widen[1])
            grid = MomentGrid.from_intervals(entries)
            before = grid.copy()
            jensen_closure(grid)
            for p, m in truth.items():
                lo, hi = grid.interval(p)
                old_lo, old_hi = before.interval(p)
                tol = 1e-9 * max(1.0, m)
                tally.check(
                    min(m - lo, hi - m) + tol,
                    lambda: f"closure excluded m_{p:g}={m}: [{lo}, {hi}]",
                )
                tally.check(
                    min(lo - old_lo, old_hi - hi) + tol,
                    lambda: f"closure widened m_{p:g}: [{old_lo}, {old_hi}] -> [{lo}, {hi}]",
                )
        return tally.result()


class VerificationRunner:
    """Runs the named suites with one seed."""

    SUITES = {
        suite.name: suite
        for suite in (GammaSuite, PovznerSuite, BinomialSuite, CollisionBoundSuite, SurplusSuite, ClosureSuite)
    }
    DEFAULT_TRIALS = {
        "gamma": 1,
        "povzner": 1000,
        "binomial": 10_000,
        "collision": 50,
        "surplus": 1000,
        "closure": 200,
    }

    def __init__(self, seed: int = 0):
        self.seed = seed

    def run(self, names: Sequence[str], trials: Optional[int] = None) -> List[SuiteResult]:
        """
        Run suites in order.

        Args:
            names: Suite names, or ["all"]
            trials: Trials per suite (defaults per suite)

        Returns:
            One SuiteResult per suite
        """
        if list(names) == ["all"]:
            names = list(self.SUITES)
        unknown = [name for name in names if name not in self.SUITES]
        if unknown:
            raise DomainError(f"Unknown suites: {', '.join(unknown)} (choose from {', '.join(self.SUITES)})")

        results = []
        for name in names:
            rng = np.random.Generator(np.random.PCG64(self.seed))
            count = self.DEFAULT_TRIALS[name] if trials is None else trials
            logger.info("Suite %s: %d trials, seed %d", name, count, self.seed)
            result = self.SUITES[name]().run(count, rng, self.seed)
            logger.info(
                "Suite %s: %d checks, %d violations, worst margin %.3g",
                name,
                result.trials,
                result.violations,
                result.worst_margin,
            )
            results.append(result)
        return results
