import math
import os
import sys

import numpy as np
import pytest
from scipy import stats

# Add core to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "core"))

from estimators import (
    LevelDistribution,
    RunStatistics,
    merge_all,
    mlmc_allocation,
    mlmc_estimate,
    plain_mc_estimate,
    rmlmc_coupled_estimate,
    rmlmc_estimate,
    rmlmc_truncated_estimate,
    sample_level_difference_coupled,
    sample_level_difference_exact,
    truncation_level,
    variance_reduction_factor,
)
from models import build_sampler, variance_at_maturity
from payoff import average_price_call, average_strike_call, build_option_spec, centered_payoff
from schedule import build_level_structure

PARAMS = {
    "bs": dict(spot=2.0, volatility=0.5, rate=0.05, dividend_yield=0.0, maturity=2.0),
    "merton": dict(
        spot=2.0,
        volatility=0.1765,
        rate=0.0559,
        dividend_yield=0.0114,
        jump_intensity=0.089,
        jump_log_mean=-0.8898,
        jump_log_sd=0.4505,
        maturity=2.0,
    ),
    "sqr": dict(spot=2.0, volatility=0.4, rate=0.05, maturity=2.0),
}
CASES = [(model, option) for model in PARAMS for option in ("avg-price-call", "avg-strike-call")]


def _setup(model, option, m, strike=2.0):
    sampler = build_sampler(model, PARAMS[model])
    if option == "avg-price-call":
        schedule, payoff = average_price_call(m, strike, sampler.maturity, carry=sampler.carry)
    else:
        schedule, payoff = average_strike_call(m, sampler.maturity, carry=sampler.carry)
    spec = build_option_spec(schedule, payoff, sampler.f0, sampler.rate)
    return build_level_structure(schedule), spec, sampler


def _agree(a, b, k=4.0, extra=0.0):
    combined = math.sqrt(a["std"] ** 2 + b["std"] ** 2)
    assert abs(a["price"] - b["price"]) <= k * combined + extra, (a, b)


def _near_published(report, value, published_std, k=4.0):
    combined = math.sqrt(report["std"] ** 2 + published_std**2)
    assert abs(report["price"] - value) <= k * combined, (report["price"], value)


# ---------------------------------------------------------------------------
# Level distributions
# ---------------------------------------------------------------------------
def test_unbiased_distribution_head():
    dist = LevelDistribution.unbiased(2.0)
    assert dist.prob(0) == pytest.approx(0.646447, abs=1e-6)
    assert dist.prob(1) / dist.prob(0) == pytest.approx(2.0**-1.5)
    assert dist.prob(-1) == 0.0


@pytest.mark.parametrize("l_max", [0, 1, 7, 23])
def test_truncated_distribution_sums_to_one(l_max):
    dist = LevelDistribution.unbiased(2.0, l_max)
    assert dist.probabilities().sum() == pytest.approx(1.0, abs=1e-14)
    assert dist.prob(l_max + 1) == 0.0
    assert np.all(dist.probabilities() > 0.0)
    assert dist.truncated


def test_halving_distribution():
    dist = LevelDistribution.halving()
    for level in range(12):
        assert dist.prob(level) == 2.0 ** -(level + 1)
    assert not dist.truncated
    with pytest.raises(ValueError):
        dist.probabilities()


def test_draw_frequencies():
    dist = LevelDistribution.unbiased(2.0, 5)
    draws = dist.draw(np.random.default_rng(0), 200_000)
    assert draws.min() >= 0 and draws.max() <= 5
    observed = np.bincount(draws, minlength=6)
    assert stats.chisquare(observed, 200_000 * dist.probabilities()).pvalue > 0.001

    geometric = LevelDistribution.halving().draw(np.random.default_rng(1), 200_000)
    p0 = (geometric == 0).mean()
    assert abs(p0 - 0.5) <= 4 * math.sqrt(0.25 / 200_000)


def test_expected_cost():
    dist = LevelDistribution.unbiased(2.0, 2)
    p = dist.probabilities()
    assert dist.expected_cost([1, 2, 3]) == pytest.approx(p[0] + 2 * p[1] + 3 * p[2])
    assert LevelDistribution.halving().expected_cost([4, 8]) == pytest.approx(0.5 * 4 + 0.25 * 8)


def test_invalid_distributions():
    with pytest.raises(ValueError):
        LevelDistribution.unbiased(0.0)
    with pytest.raises(ValueError):
        LevelDistribution.unbiased(2.0, -1)


# ---------------------------------------------------------------------------
# Streaming statistics
# ---------------------------------------------------------------------------
def test_run_statistics_matches_two_pass():
    samples = np.random.default_rng(2).lognormal(0.3, 0.8, 10_000)
    stats_ = RunStatistics()
    for chunk in np.array_split(samples, [1, 7, 500, 501, 4000]):
        stats_.update(chunk, cost=chunk.size)
    assert stats_.count == 10_000
    assert stats_.cost == 10_000
    assert stats_.mean == pytest.approx(samples.mean(), rel=1e-10)
    assert stats_.variance == pytest.approx(samples.var(ddof=1), rel=1e-10)
    assert stats_.std_error == pytest.approx(samples.std(ddof=1) / 100.0, rel=1e-10)


def test_run_statistics_merge_is_associative():
    rng = np.random.default_rng(3)
    parts = [RunStatistics().update(rng.normal(k, 1.0 + k, 300 + 50 * k), cost=k) for k in range(3)]
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[0].merge(parts[1].merge(parts[2]))
    assert left.count == right.count == merge_all(parts).count
    assert left.cost == right.cost == 3
    assert left.mean == pytest.approx(right.mean, rel=1e-12)
    assert left.m2 == pytest.approx(right.m2, rel=1e-12)


def test_run_statistics_small_counts():
    single = RunStatistics().update([1.5])
    assert math.isnan(single.variance)
    assert math.isnan(single.std_error)
    assert RunStatistics().merge(single).mean == 1.5


# ---------------------------------------------------------------------------
# Exact level differences
# ---------------------------------------------------------------------------
def test_level0_difference_is_two_point_payoff():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    values, nodes = sample_level_difference_exact(ls, spec, sampler, 0, np.random.default_rng(5), 10)
    forwards = sampler.sample_on(spec.schedule.dates[[7]], np.random.default_rng(5), 10)
    expected = centered_payoff(spec, ls.functional(0).evaluate(spec.f0, forwards))
    np.testing.assert_array_equal(values, expected)
    assert nodes == 10


def test_difference_above_top_level_is_zero():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    values, nodes = sample_level_difference_exact(ls, spec, sampler, ls.max_level + 1, np.random.default_rng(6), 4)
    np.testing.assert_array_equal(values, 0.0)
    assert nodes == 0
    with pytest.raises(ValueError):
        sample_level_difference_exact(ls, spec, sampler, -1, np.random.default_rng(6))


def test_level_differences_telescope():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    n = 200_000
    total_mean, total_var = 0.0, 0.0
    for level in range(ls.max_level + 1):
        values, nodes = sample_level_difference_exact(ls, spec, sampler, level, np.random.default_rng(10 + level), n)
        assert nodes == n * ls.subset(level).size
        total_mean += values.mean()
        total_var += values.var(ddof=1) / n
    plain = plain_mc_estimate(spec, sampler, n, seed=99)
    combined = math.sqrt(total_var + (plain["std"] / spec.discount) ** 2)
    assert abs(total_mean - plain["mean"]) <= 4 * combined


# ---------------------------------------------------------------------------
# RMLMC
# ---------------------------------------------------------------------------
def test_rmlmc_single_date_is_black76():
    ls, spec, sampler = _setup("bs", "avg-price-call", 1)
    report = rmlmc_estimate(ls, spec, sampler, 200_000, seed=1)
    f0, k, vol, t = sampler.f0, 2.0, 0.5, 2.0
    d1 = (math.log(f0 / k) + 0.5 * vol**2 * t) / (vol * math.sqrt(t))
    d2 = d1 - vol * math.sqrt(t)
    black76 = math.exp(-0.05 * t) * (f0 * stats.norm.cdf(d1) - k * stats.norm.cdf(d2))
    assert black76 == pytest.approx(0.6265, abs=1e-4)
    assert abs(report["price"] - black76) <= 4 * report["std"]
    assert report["cost"] == 200_000


def test_rmlmc_is_deterministic():
    ls, spec, sampler = _setup("merton", "avg-strike-call", 16)
    first = rmlmc_estimate(ls, spec, sampler, 5_000, seed=123)
    second = rmlmc_estimate(ls, spec, sampler, 5_000, seed=123)
    assert first == second
    assert rmlmc_estimate(ls, spec, sampler, 5_000, seed=124) != first


def test_rmlmc_workers_reproducible_and_consistent():
    ls, spec, sampler = _setup("bs", "avg-price-call", 16)
    one = rmlmc_estimate(ls, spec, sampler, 40_000, seed=7, workers=1)
    two = rmlmc_estimate(ls, spec, sampler, 40_000, seed=7, workers=2)
    assert rmlmc_estimate(ls, spec, sampler, 40_000, seed=7, workers=2) == two
    assert two["n"] == 40_000
    _agree(one, two)


def test_rmlmc_untruncated_variant_agrees():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    truncated = rmlmc_estimate(ls, spec, sampler, 100_000, seed=3)
    untruncated = rmlmc_estimate(ls, spec, sampler, 100_000, seed=4, truncate=False)
    _agree(truncated, untruncated)
    assert len(truncated["level_counts"]) == ls.max_level + 1


def test_rmlmc_rejects_small_n():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    with pytest.raises(ValueError):
        rmlmc_estimate(ls, spec, sampler, 1)
    with pytest.raises(ValueError):
        rmlmc_estimate(ls, spec, sampler, 10, workers=0)


def test_rmlmc_cost_per_replication_bounded_in_m():
    per_replication = {}
    for m in (125, 500):
        ls, spec, sampler = _setup("bs", "avg-price-call", m)
        report = rmlmc_estimate(ls, spec, sampler, 100_000, seed=m)
        per_replication[m] = report["cost"] / report["n"]
        expected = LevelDistribution.unbiased(2.0, ls.max_level).expected_cost(ls.subset_sizes())
        assert per_replication[m] == pytest.approx(expected, rel=0.05)
    assert per_replication[500] <= 1.3 * per_replication[125]


# ---------------------------------------------------------------------------
# MLMC
# ---------------------------------------------------------------------------
def test_mlmc_allocation_by_hand():
    assert mlmc_allocation([4.0, 1.0], [1, 2], 2.0).tolist() == [2, 1]


def test_mlmc_allocation_degenerate_pilot():
    assert mlmc_allocation([0.0, 0.0, 0.0], [1, 2, 4], 300.0).tolist() == [1, 1, 1]


def test_mlmc_report_structure():
    ls, spec, sampler = _setup("bs", "avg-strike-call", 16)
    pilot_n = 500
    report = mlmc_estimate(ls, spec, sampler, pilot_n=pilot_n, seed=5, outer_n=3)
    assert report["n"] == 3
    counts = np.array(report["level_counts"])
    assert counts.size == ls.max_level + 1
    assert np.all(counts >= 3) and np.all(counts % 3 == 0)
    phase_cost = int((counts * ls.subset_sizes()).sum())
    assert report["cost"] == pilot_n * int(ls.subset_sizes().sum()) + phase_cost


def test_mlmc_rejects_bad_arguments():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    with pytest.raises(ValueError):
        mlmc_estimate(ls, spec, sampler, pilot_n=1)
    with pytest.raises(ValueError):
        mlmc_estimate(ls, spec, sampler, pilot_n=100, outer_n=0)


def test_mlmc_cost_scales_with_m():
    per_date = {}
    for m in (125, 500):
        ls, spec, sampler = _setup("bs", "avg-price-call", m)
        report = mlmc_estimate(ls, spec, sampler, pilot_n=1_000, seed=m, outer_n=50)
        per_date[m] = report["cost"] / (report["n"] * m)
    assert 0.5 <= per_date[500] / per_date[125] <= 2.0


# ---------------------------------------------------------------------------
# Agreement between estimators
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("model, option", CASES)
def test_estimators_agree_m8(model, option):
    ls, spec, sampler = _setup(model, option, 8)
    plain = plain_mc_estimate(spec, sampler, 100_000, seed=1)
    rmlmc = rmlmc_estimate(ls, spec, sampler, 100_000, seed=2)
    mlmc = mlmc_estimate(ls, spec, sampler, pilot_n=2_000, seed=3, outer_n=200)
    _agree(plain, rmlmc)
    _agree(plain, mlmc)
    _agree(rmlmc, mlmc)


@pytest.mark.slow
@pytest.mark.parametrize("model, option", CASES)
def test_estimators_agree_m125(model, option):
    ls, spec, sampler = _setup(model, option, 125)
    plain = plain_mc_estimate(spec, sampler, 100_000, seed=1)
    rmlmc = rmlmc_estimate(ls, spec, sampler, 100_000, seed=2)
    mlmc = mlmc_estimate(ls, spec, sampler, seed=3, outer_n=100)
    _agree(plain, rmlmc)
    _agree(plain, mlmc)


def test_plain_mc_cost_and_payoff_variance():
    ls, spec, sampler = _setup("sqr", "avg-price-call", 12)
    report = plain_mc_estimate(spec, sampler, 3_001, seed=4, workers=2)
    assert report["cost"] == 3_001 * 12
    assert report["payoff_variance"] == report["sample_variance"] > 0.0


def test_variance_reduction_factor_formula():
    ls, spec, sampler = _setup("bs", "avg-price-call", 125)
    report = {"cost": 2_000, "std": 0.01}
    expected = 125 * math.exp(-0.2) * 0.3 / (2_000 * 1e-4)
    assert variance_reduction_factor(report, spec, 0.3) == pytest.approx(expected)


# ---------------------------------------------------------------------------
# Variance bounds in terms of kappa^2 var(F_m)
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("m", [125, 500])
@pytest.mark.parametrize("model, option", CASES)
def test_rmlmc_variance_bound(model, option, m):
    ls, spec, sampler = _setup(model, option, m)
    report = rmlmc_estimate(ls, spec, sampler, 20_000, seed=m)
    bound = 70 * spec.payoff.lipschitz_bound**2 * variance_at_maturity(sampler)
    assert report["sample_variance"] <= bound


@pytest.mark.parametrize("m", [125, 500])
@pytest.mark.parametrize("model, option", CASES)
def test_mlmc_variance_bound(model, option, m):
    ls, spec, sampler = _setup(model, option, m)
    report = mlmc_estimate(ls, spec, sampler, pilot_n=2_000, budget_multiplier=1.0, seed=m, outer_n=20)
    bound = 240 * spec.payoff.lipschitz_bound**2 * variance_at_maturity(sampler)
    assert m * report["sample_variance"] <= bound


# ---------------------------------------------------------------------------
# Coupled schemes
# ---------------------------------------------------------------------------
def test_coupled_rejects_beta():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    for beta in (1.0, 2.5):
        with pytest.raises(ValueError):
            rmlmc_coupled_estimate(ls, spec, sampler.as_sde(), beta=beta, n=100)


def test_coupled_level0_uses_value_at_maturity():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    values, nodes = sample_level_difference_coupled(ls, spec, sampler.as_sde(), 0, np.random.default_rng(8), 5)
    assert values.shape == (5,)
    assert nodes == 5  # grid {0, T}


def test_coupled_milstein_is_unbiased_m8():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    exact = rmlmc_estimate(ls, spec, sampler, 100_000, seed=11)
    coupled = rmlmc_coupled_estimate(ls, spec, sampler.as_sde(), n=40_000, seed=12)
    assert coupled["method"] == "rmlmc-milstein"
    _agree(exact, coupled)


def test_coupled_levels_telescope_m125():
    ls, spec, sampler = _setup("bs", "avg-price-call", 125)
    sde = sampler.as_sde()
    n = 20_000
    total_mean, total_var = 0.0, 0.0
    for level in range(9):
        values, _ = sample_level_difference_coupled(ls, spec, sde, level, np.random.default_rng(200 + level), n)
        total_mean += values.mean()
        total_var += values.var(ddof=1) / n
    plain = plain_mc_estimate(spec, sampler, 100_000, seed=13)
    combined = math.sqrt(total_var + (plain["std"] / spec.discount) ** 2)
    assert abs(total_mean - plain["mean"]) <= 4 * combined


def test_truncation_level():
    assert truncation_level(0.1) == 7
    assert truncation_level(0.05) == 9
    for epsilon in (0.0, 0.5, 0.7, -0.1):
        with pytest.raises(ValueError):
            truncation_level(epsilon)


@pytest.mark.parametrize("epsilon", [0.1, 0.05])
def test_truncated_euler_bias_within_bound(epsilon):
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    exact = rmlmc_estimate(ls, spec, sampler, 100_000, seed=21)
    truncated = rmlmc_truncated_estimate(ls, spec, sampler.as_sde(), epsilon, 40_000, seed=22)
    assert truncated["bias_bound"] > 0.0
    counts = truncated["level_counts"]
    assert len(counts) > 0 and sum(counts) == 40_000
    _agree(exact, truncated, extra=spec.discount * math.sqrt(truncated["bias_bound"]))


def test_truncated_levels_above_cutoff_cost_nothing():
    ls, spec, sampler = _setup("bs", "avg-price-call", 8)
    report = rmlmc_truncated_estimate(ls, spec, sampler.as_sde(), 0.4, 2_000, seed=23)
    cutoff = truncation_level(0.4)
    counts = report["level_counts"]
    max_nodes = sum(
        counts[level] * (2 * ls.subset(level).size + 2**level + 2 ** max(level - 1, 0) + 2)
        for level in range(min(len(counts), cutoff + 1))
    )
    assert report["cost"] <= max_nodes


# ---------------------------------------------------------------------------
# Published desk-scale reproductions
# ---------------------------------------------------------------------------
@pytest.mark.slow
@pytest.mark.parametrize("m, value, published_std", [(125, 0.35239, 4.6e-5), (250, 0.35126, 4.7e-5), (500, 0.3507, 4.7e-5)])
def test_black_scholes_average_price_rmlmc(m, value, published_std):
    ls, spec, sampler = _setup("bs", "avg-price-call", m)
    _near_published(rmlmc_estimate(ls, spec, sampler, 1_000_000, seed=42), value, published_std)


@pytest.mark.slow
@pytest.mark.parametrize("m, value, published_std", [(125, 0.36327, 4.3e-5), (250, 0.36291, 4.4e-5), (500, 0.36275, 4.4e-5)])
def test_black_scholes_average_strike_mlmc(m, value, published_std):
    ls, spec, sampler = _setup("bs", "avg-strike-call", m)
    report = mlmc_estimate(ls, spec, sampler, seed=42, outer_n=max(1, 1_000_000 // (10 * m)))
    _near_published(report, value, published_std)


@pytest.mark.slow
@pytest.mark.parametrize(
    "model, option, m, value, published_std",
    [
        ("merton", "avg-price-call", 250, 0.1924, 1.6e-5),
        ("merton", "avg-strike-call", 125, 0.20107, 2.2e-5),
        ("sqr", "avg-price-call", 125, 0.21837, 2.0e-5),
        ("sqr", "avg-strike-call", 500, 0.22484, 3.0e-5),
    ],
)
def test_merton_and_square_root_rmlmc(model, option, m, value, published_std):
    ls, spec, sampler = _setup(model, option, m)
    _near_published(rmlmc_estimate(ls, spec, sampler, 1_000_000, seed=42), value, published_std)


@pytest.mark.slow
def test_black_scholes_average_price_milstein():
    ls, spec, sampler = _setup("bs", "avg-price-call", 125)
    report = rmlmc_coupled_estimate(ls, spec, sampler.as_sde(), n=1_000_000, seed=42)
    _near_published(report, 0.35236, 4.4e-5)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
