"""Brute-force reference solver: hand-checkable cases and path agreement."""

import numpy as np
import pytest

from conftest import random_spd
from meanrisk.model import LinearRisk, MeanRiskInstance, QuadraticRisk, objective_min
from meanrisk.oracle import (
    EnumerationBudgetExceeded,
    continuous_min_kkt,
    continuous_min_pgd,
    oracle_solve,
)


def _inst(r, a, b, M, integer_set=()):
    return MeanRiskInstance(
        r=np.asarray(r, dtype=float),
        a=np.asarray(a, dtype=float),
        b=float(b),
        M=np.asarray(M, dtype=float),
        integer_set=integer_set,
    )


def test_continuous_quadratic_interior_matches_closed_form():
    # unconstrained optimum r / 2 = (0.25, 0.125) sits strictly inside the
    # budget region, so the maximum is r'r / 4
    inst = _inst([0.5, 0.25], [1.0, 1.0], 1.0, np.eye(2))
    obj, y = oracle_solve(inst, QuadraticRisk(1.0))
    assert obj == pytest.approx(0.078125, abs=1e-9)
    np.testing.assert_allclose(y, [0.25, 0.125], atol=1e-9)


def test_enormous_risk_aversion_keeps_zero_portfolio():
    from meanrisk.instances import generate_instance

    inst = generate_instance(4, integer_fraction=0.5, seed=1)
    obj, y = oracle_solve(inst, LinearRisk(1e6))
    assert obj == 0.0
    assert not np.any(y)


def test_pure_integer_line_by_hand():
    # y in {0, 1, 2}: objective 3y - y peaks at y = 2
    inst = _inst([3.0], [1.0], 2.5, [[1.0]], integer_set=(0,))
    obj, y = oracle_solve(inst, LinearRisk(1.0))
    assert obj == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_array_equal(y, [2.0])


def test_mixed_instance_by_hand():
    # per copy count of the integer item, the continuous item completes to
    # min(1, leftover): values 1, 3, 2.75 peak at y = (1, 1)
    inst = _inst([3.0, 2.0], [1.0, 1.0], 2.5, np.eye(2), integer_set=(0,))
    obj, y = oracle_solve(inst, QuadraticRisk(1.0))
    assert obj == pytest.approx(3.0, abs=1e-7)
    np.testing.assert_allclose(y, [1.0, 1.0], atol=1e-7)


def test_gradient_and_activeset_paths_agree():
    rng = np.random.default_rng(31)
    h = QuadraticRisk(1.0)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        M = random_spd(rng, n, 1.0)
        r = rng.uniform(0.1, 1.0, n)
        a = rng.uniform(1.0, 5.0, n)
        # budget between a third of and 1.5x the unconstrained spend, so the
        # cap binds on some draws and stays slack on others
        spend = float(a @ np.maximum(np.linalg.solve(2.0 * M, r), 0.0))
        b = float(rng.uniform(0.3, 1.5)) * max(spend, 0.1)
        inst = MeanRiskInstance(r=r, a=a, b=b, M=M)
        y_fixed = np.zeros(n)
        cont = list(range(n))
        y_pgd = y_fixed.copy()
        y_pgd[cont] = continuous_min_pgd(inst, h, y_fixed, cont, b)
        y_kkt_block = continuous_min_kkt(inst, h, y_fixed, cont, b)
        assert y_kkt_block is not None
        y_kkt = y_fixed.copy()
        y_kkt[cont] = y_kkt_block
        v_pgd = objective_min(inst, y_pgd, h)
        v_kkt = objective_min(inst, y_kkt, h)
        assert v_pgd == pytest.approx(v_kkt, abs=1e-7 * max(1.0, abs(v_kkt)))


def test_enumeration_budget_guard():
    from meanrisk.instances import generate_instance

    wide = generate_instance(8, integer_fraction=1.0, budget_multiplier=100.0, seed=0)
    with pytest.raises(EnumerationBudgetExceeded):
        oracle_solve(wide, LinearRisk(1.0))
    small = generate_instance(3, integer_fraction=1.0, budget_multiplier=0.02, seed=0)
    with pytest.raises(EnumerationBudgetExceeded):
        oracle_solve(small, LinearRisk(1.0), enum_budget=1)
