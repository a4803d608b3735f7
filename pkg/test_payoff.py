import math
import os
import sys

import numpy as np
import pytest

# Add core to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "core"))

from errors import SimulationError
from payoff import (
    Payoff,
    average_price_call,
    average_strike_call,
    build_option_spec,
    centered_payoff,
    equidistant_dates,
)

F0 = 2.0 * math.exp(0.1)  # S_0 = 2, r = 5%, q = 0, T = 2


def test_average_price_ramp():
    _, payoff = average_price_call(4, 2.0, 2.0)
    assert payoff(2.5) == pytest.approx(0.5)
    assert payoff(1.5) == 0.0
    assert payoff.lipschitz_bound == 1.0


def test_average_price_baseline():
    schedule, payoff = average_price_call(125, 2.0, 2.0)
    spec = build_option_spec(schedule, payoff, F0, 0.05)
    assert spec.baseline_a == pytest.approx(0.2103418, abs=1e-6)
    assert spec.discount == pytest.approx(math.exp(-0.1))


@pytest.mark.parametrize("m", [1, 3, 125, 1000])
def test_average_price_weights_sum_to_one(m):
    schedule, _ = average_price_call(m, 2.0, 2.0)
    assert schedule.weight_total == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(schedule.weights, 1.0 / m)
    np.testing.assert_allclose(schedule.dates, 2.0 * np.arange(1, m + 1) / m)


def test_average_strike_weights_m3():
    schedule, payoff = average_strike_call(3, 2.0)
    np.testing.assert_array_equal(schedule.weights, [-0.25, -0.25, 0.5])
    assert payoff.lipschitz_bound == 2.0
    spec = build_option_spec(schedule, payoff, F0, 0.05)
    assert spec.baseline_a == 0.0


@pytest.mark.parametrize("m", [2, 125, 500])
def test_average_strike_weights(m):
    schedule, _ = average_strike_call(m, 2.0)
    np.testing.assert_allclose(schedule.weights[:-1], -0.5 / (m - 1))
    assert schedule.weights[-1] == pytest.approx(0.5)
    assert np.abs(schedule.weights).sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(schedule.weight_total) < 1e-12


@pytest.mark.parametrize("m", [3, 8, 125, 250, 500])
def test_average_strike_baseline_is_exactly_zero(m):
    schedule, payoff = average_strike_call(m, 2.0)
    assert schedule.weight_total == 0.0
    spec = build_option_spec(schedule, payoff, F0, 0.05)
    assert spec.baseline_a == 0.0
    assert centered_payoff(spec, 0.0) == 0.0


def test_average_strike_payoff():
    _, payoff = average_strike_call(3, 2.0)
    assert payoff(-1.0) == 0.0
    assert payoff(0.3) == pytest.approx(0.6)


@pytest.mark.parametrize(
    "factory",
    [
        lambda: average_price_call(0, 2.0, 2.0),
        lambda: average_price_call(4, -1.0, 2.0),
        lambda: average_strike_call(1, 2.0),
    ],
)
def test_invalid_contracts(factory):
    with pytest.raises(ValueError):
        factory()


def test_centered_payoff():
    schedule, payoff = average_price_call(8, 2.0, 2.0)
    spec = build_option_spec(schedule, payoff, F0, 0.05)
    assert centered_payoff(spec, 2.0) == pytest.approx(-spec.baseline_a)
    assert centered_payoff(spec, schedule.weight_total * F0) == pytest.approx(0.0, abs=1e-15)

    schedule, payoff = average_strike_call(8, 2.0)
    spec = build_option_spec(schedule, payoff, F0, 0.05)
    np.testing.assert_allclose(centered_payoff(spec, np.array([-0.4, 0.0, 0.7])), [0.0, 0.0, 1.4])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_centered_payoff_rejects_non_finite(bad):
    schedule, payoff = average_price_call(8, 2.0, 2.0)
    spec = build_option_spec(schedule, payoff, F0, 0.05)
    with pytest.raises(SimulationError):
        centered_payoff(spec, np.array([1.0, bad]))


@pytest.mark.parametrize(
    "build",
    [
        lambda: average_price_call(125, 2.0, 2.0)[1],
        lambda: average_price_call(125, 2.0, 2.0, carry=0.05)[1],
        lambda: average_strike_call(125, 2.0)[1],
        lambda: average_strike_call(125, 2.0, carry=0.0445)[1],
    ],
)
def test_lipschitz_bound_holds(build):
    payoff: Payoff = build()
    rng = np.random.default_rng(11)
    x = rng.uniform(-4.0, 6.0, 100_000)
    y = rng.uniform(-4.0, 6.0, 100_000)
    assert np.all(np.abs(payoff(x) - payoff(y)) <= payoff.lipschitz_bound * np.abs(x - y) + 1e-12)


# ---------------------------------------------------------------------------
# Spot-average contracts written on forwards
# ---------------------------------------------------------------------------
def test_carry_average_price_matches_spot_average():
    m, maturity, carry, strike = 12, 2.0, 0.05, 2.0
    schedule, payoff = average_price_call(m, strike, maturity, carry=carry)
    dates = equidistant_dates(m, maturity)
    forwards = np.random.default_rng(3).uniform(1.5, 3.0, (50, m))
    spots = np.exp(-carry * (maturity - dates)) * forwards
    expected = np.maximum(spots.mean(axis=1) - strike, 0.0)
    np.testing.assert_allclose(payoff(forwards @ schedule.weights), expected, rtol=1e-12, atol=1e-12)
    assert payoff.lipschitz_bound < 1.0


def test_carry_average_strike_matches_spot_average():
    m, maturity, carry = 12, 2.0, 0.0445
    schedule, payoff = average_strike_call(m, maturity, carry=carry)
    dates = equidistant_dates(m, maturity)
    forwards = np.random.default_rng(4).uniform(1.5, 3.0, (50, m))
    spots = np.exp(-carry * (maturity - dates)) * forwards
    expected = np.maximum(spots[:, -1] - spots[:, :-1].mean(axis=1), 0.0)
    np.testing.assert_allclose(payoff(forwards @ schedule.weights), expected, rtol=1e-12, atol=1e-12)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
