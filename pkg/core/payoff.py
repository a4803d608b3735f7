"""
Lipschitz payoffs f, the baseline a = f(W(1,m) F_0) and the centered payoff U = f(A) - a.

Both built-in contracts accept a carry rate c. Contracts written on the spot
average are mapped to forwards through S_i = exp(-c (T - t_i)) F_i; the
normalization of the resulting weights is folded back into f. With c = 0 the
contracts are written directly on forward prices.
"""

from dataclasses import dataclass
from functools import partial
from typing import Callable, Tuple

import numpy as np

from errors import SimulationError
from schedule import MonitoringSchedule, build_schedule


def _ramp(x: np.ndarray, scale: float, strike: float) -> np.ndarray:
    return np.maximum(scale * x - strike, 0.0)


def _scaled_positive_part(x: np.ndarray, scale: float) -> np.ndarray:
    return scale * np.maximum(x, 0.0)


@dataclass(frozen=True)
class Payoff:
    evaluate: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float
    description: str

    def __call__(self, x):
        return self.evaluate(x)


@dataclass(frozen=True)
class OptionSpec:
    schedule: MonitoringSchedule
    payoff: Payoff
    f0: float
    rate: float
    baseline_a: float

    @property
    def maturity(self) -> float:
        return self.schedule.maturity

    @property
    def discount(self) -> float:
        return float(np.exp(-self.rate * self.maturity))

    def price(self, mean_centered: float) -> float:
        """Discounted price e^{-rT}(E[estimator] + a)."""
        return self.discount * (mean_centered + self.baseline_a)


def equidistant_dates(m: int, maturity: float) -> np.ndarray:
    return maturity * np.arange(1, m + 1, dtype=np.float64) / m


def average_price_call(
    m: int, strike: float, maturity: float, carry: float = 0.0
) -> Tuple[MonitoringSchedule, Payoff]:
    """
    Average price call max(mean(S_i) - K, 0) on equidistant dates t_i = iT/m.

    Args:
        m: Number of monitoring dates.
        strike: Strike K, in price units.
        maturity: T in years.
        carry: Rate c linking spot and forward prices; 0 averages forwards.

    Returns:
        (schedule, payoff). With carry 0 the weights are 1/m and f(x) = max(x - K, 0).
    """
    if m < 1:
        raise ValueError(f"average price call needs m >= 1, got {m}")
    if strike < 0.0:
        raise ValueError(f"strike must be non-negative, got {strike}")
    dates = equidistant_dates(m, maturity)
    growth = np.exp(-carry * (maturity - dates))
    # mean(S) = (sum(growth) / m) * A, exactly 1 when carry is 0
    scale = float(growth.sum()) / m
    schedule = build_schedule(dates, growth)
    payoff = Payoff(
        evaluate=partial(_ramp, scale=scale, strike=float(strike)),
        lipschitz_bound=scale,
        description=f"average price call K={strike:g} m={m}",
    )
    return schedule, payoff


def average_strike_call(
    m: int, maturity: float, carry: float = 0.0
) -> Tuple[MonitoringSchedule, Payoff]:
    """Average strike call max(S_m - mean(S_1..S_{m-1}), 0); carry 0 gives f(x) = 2 max(x, 0)."""
    if m < 2:
        raise ValueError(f"average strike call needs m >= 2, got {m}")
    dates = equidistant_dates(m, maturity)
    raw = -np.exp(-carry * (maturity - dates))
    raw[-1] = float(m - 1)
    scale = float(np.abs(raw).sum()) / (m - 1)
    schedule = build_schedule(dates, raw)
    payoff = Payoff(
        evaluate=partial(_scaled_positive_part, scale=scale),
        lipschitz_bound=scale,
        description=f"average strike call m={m}",
    )
    return schedule, payoff


def build_option_spec(
    schedule: MonitoringSchedule, payoff: Payoff, f0: float, rate: float
) -> OptionSpec:
    baseline = float(payoff(np.float64(schedule.weight_total * f0)))
    return OptionSpec(schedule=schedule, payoff=payoff, f0=float(f0), rate=float(rate), baseline_a=baseline)


def centered_payoff(spec: OptionSpec, a_value):
    """U = f(x) - a; non-finite inputs mean the simulation upstream failed."""
    values = np.asarray(a_value, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise SimulationError("non-finite value of the weighted average")
    return spec.payoff(values) - spec.baseline_a
