"""Tests for the randomized verification suites."""

import numpy as np
import pytest

from backend.verification_service.suites import GammaSuite, VerificationRunner
from backend.shared.exceptions import DomainError


@pytest.mark.parametrize(
    "name, trials",
    [("povzner", 20), ("binomial", 500), ("collision", 3), ("surplus", 20), ("closure", 50)],
)
def test_suite_has_no_violations(name, trials):
    (result,) = VerificationRunner(seed=3).run([name], trials=trials)
    assert result.suite == name
    assert result.seed == 3
    assert result.trials >= trials
    assert result.violations == 0
    assert result.passed
    assert result.worst_margin >= 0.0
    assert result.failures == []


def test_gamma_suite_on_small_table():
    result = GammaSuite(n_beta=3, p_values=[1.0, 1.5, 2.0, 3.0]).run(1, np.random.default_rng(0), 0)
    assert result.passed
    # normalization and closed forms at beta = 0.5 and 1, bounds and monotonicity everywhere
    assert result.trials == 3 + 2 * 4 + 3 * 3 + 3 * 3


def test_same_seed_same_result():
    runner = VerificationRunner(seed=8)
    first = runner.run(["binomial"], trials=200)[0]
    second = runner.run(["binomial"], trials=200)[0]
    assert first.worst_margin == second.worst_margin
    assert first.trials == second.trials


def test_unknown_suite():
    with pytest.raises(DomainError):
        VerificationRunner().run(["povzner", "nonsense"], trials=1)
