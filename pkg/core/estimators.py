"""
Plain, randomized multilevel and multilevel Monte Carlo estimators.

All estimators take a `seed` and a worker count. The seed is expanded with
numpy's SeedSequence into one independent stream per worker; each worker
fills its own RunStatistics and the results are merged in worker order, so a
fixed (seed, workers) pair is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from payoff import OptionSpec, centered_payoff
from schedule import LevelStructure
from schemes import Sde, euler_coupled, milstein_coupled

SeedLike = Union[None, int, np.random.SeedSequence]

# elements per simulated batch (paths x nodes)
BATCH_ELEMENTS = 2**22
DEFAULT_PILOT_N = 10_000
DEFAULT_BUDGET_MULTIPLIER = 30.0


###############################################################################
# Level distributions
###############################################################################
@dataclass(frozen=True)
class LevelDistribution:
    """
    Geometric law p_l = (1 - q) q^l on l = 0, 1, ..., optionally truncated
    at `l_max` and renormalized.
    """

    ratio: float  # q
    beta: float
    l_max: Optional[int] = None

    @classmethod
    def unbiased(cls, beta: float = 2.0, l_max: Optional[int] = None) -> "LevelDistribution":
        """p_l proportional to 2^{-(beta+1) l / 2}."""
        if beta <= 0.0:
            raise ValueError(f"beta must be positive, got {beta}")
        if l_max is not None and l_max < 0:
            raise ValueError(f"l_max must be non-negative, got {l_max}")
        return cls(ratio=2.0 ** (-(beta + 1.0) / 2.0), beta=beta, l_max=l_max)

    @classmethod
    def halving(cls) -> "LevelDistribution":
        """p_l = 2^{-(l+1)}, used by the truncated estimator."""
        return cls(ratio=0.5, beta=1.0, l_max=None)

    @property
    def truncated(self) -> bool:
        return self.l_max is not None

    def probabilities(self, upto: Optional[int] = None) -> np.ndarray:
        """p_0..p_upto (defaults to the whole support when truncated)."""
        if upto is None:
            if self.l_max is None:
                raise ValueError("an unbounded distribution needs an explicit `upto`")
            upto = self.l_max
        levels = np.arange(upto + 1)
        raw = (1.0 - self.ratio) * self.ratio ** levels.astype(np.float64)
        if self.l_max is None:
            return raw
        mass = ((1.0 - self.ratio) * self.ratio ** np.arange(self.l_max + 1, dtype=np.float64)).sum()
        raw = raw / mass
        raw[levels > self.l_max] = 0.0
        return raw

    def prob(self, level: int) -> float:
        if level < 0:
            return 0.0
        if self.l_max is None:
            return (1.0 - self.ratio) * self.ratio**level
        if level > self.l_max:
            return 0.0
        return float(self.probabilities()[level])

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.l_max is None:
            return rng.geometric(1.0 - self.ratio, size=size) - 1
        return rng.choice(self.l_max + 1, size=size, p=self.probabilities())

    def expected_cost(self, level_costs: Sequence[float]) -> float:
        """sum_l p_l C_l over the levels for which a cost is given."""
        costs = np.asarray(level_costs, dtype=np.float64)
        return float(self.probabilities(costs.size - 1) @ costs)


###############################################################################
# Streaming statistics
###############################################################################
@dataclass
class RunStatistics:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    cost: int = 0

    def update(self, values, cost: int = 0) -> "RunStatistics":
        """Fold a batch of samples in (Chan et al. pairwise update)."""
        values = np.asarray(values, dtype=np.float64).ravel()
        self.cost += int(cost)
        if values.size == 0:
            return self
        batch_mean = float(values.mean())
        batch_m2 = float(((values - batch_mean) ** 2).sum())
        self._combine(values.size, batch_mean, batch_m2)
        return self

    def _combine(self, n_b: int, mean_b: float, m2_b: float) -> None:
        n_a = self.count
        total = n_a + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / total
        self.m2 += m2_b + delta * delta * n_a * n_b / total
        self.count = total

    def merge(self, other: "RunStatistics") -> "RunStatistics":
        out = RunStatistics(count=self.count, mean=self.mean, m2=self.m2, cost=self.cost + other.cost)
        if other.count:
            out._combine(other.count, other.mean, other.m2)
        return out

    @property
    def variance(self) -> float:
        if self.count < 2:
            return float("nan")
        return self.m2 / (self.count - 1)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count >= 2 else float("nan")


def merge_all(parts: Sequence[RunStatistics]) -> RunStatistics:
    out = RunStatistics()
    for part in parts:
        out = out.merge(part)
    return out


class EstimateReport(TypedDict):
    method: str
    n: int
    mean: float  # undiscounted mean of the centered estimator
    price: float
    std: float  # discounted standard error
    cost: int
    work_norm_var: float
    sample_variance: float  # variance of one replication, undiscounted
    vrf: Optional[float]
    bias_bound: Optional[float]
    payoff_variance: Optional[float]
    level_counts: Optional[List[int]]


def _report(
    method: str,
    spec: OptionSpec,
    n: int,
    mean: float,
    variance_of_mean: float,
    cost: int,
    sample_variance: float,
    **extra,
) -> EstimateReport:
    std = spec.discount * math.sqrt(variance_of_mean)
    report = EstimateReport(
        method=method,
        n=int(n),
        mean=float(mean),
        price=spec.price(mean),
        std=float(std),
        cost=int(cost),
        work_norm_var=float(cost * std**2),
        sample_variance=float(sample_variance),
        vrf=None,
        bias_bound=None,
        payoff_variance=None,
        level_counts=None,
    )
    report.update(extra)
    logger.info(f"{method}: price={report['price']:.6f} std={report['std']:.3g} cost={report['cost']} n={n}")
    return report


###############################################################################
# Streams and fan-out
###############################################################################
def _root_sequence(seed: SeedLike) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _split(total: int, workers: int) -> List[int]:
    return [total // workers + (1 if i < total % workers else 0) for i in range(workers)]


def _fan_out(task: Callable, shares: Sequence, streams: Sequence[np.random.SeedSequence], workers: int) -> list:
    """Run task(share, stream) per worker; results come back in worker order."""
    if workers == 1:
        return [task(share, stream) for share, stream in zip(shares, streams)]
    return Parallel(n_jobs=workers)(delayed(task)(share, stream) for share, stream in zip(shares, streams))


def _check_workers(workers: int, n: int) -> int:
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers > n:
        logger.warning(f"workers={workers} exceeds replications n={n}; using {n}")
        return n
    return workers


def _check_n(n: int) -> None:
    if n < 2:
        raise ValueError(f"need at least 2 replications, got n={n}")


###############################################################################
# Exact level differences
###############################################################################
def _differences_from_forwards(ls: LevelStructure, spec: OptionSpec, forwards: np.ndarray, level: int) -> np.ndarray:
    """U_l - U_{l-1} from forwards observed on J_l."""
    fine = ls.functional(level)
    u_fine = centered_payoff(spec, fine.evaluate(spec.f0, forwards))
    if level == 0:
        return u_fine
    coarse = ls.functional(level - 1)
    columns = np.searchsorted(fine.simulated_indices, coarse.simulated_indices)
    u_coarse = centered_payoff(spec, coarse.evaluate(spec.f0, forwards[:, columns]))
    return u_fine - u_coarse


def sample_level_difference_exact(
    ls: LevelStructure, spec: OptionSpec, sampler, level: int, rng: np.random.Generator, size: int = 1
) -> Tuple[np.ndarray, int]:
    """
    Draw `size` independent copies of U_l - U_{l-1} from exact paths on J_l.

    Args:
        ls: Level structure of the option's schedule.
        spec: Option specification.
        sampler: Exact forward sampler.
        level: l >= 0; levels above L return zeros without simulating.
        rng: Generator.
        size: Number of copies.

    Returns:
        (values of shape (size,), number of simulated forward prices)
    """
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    if level > ls.max_level:
        return np.zeros(size), 0
    subset = ls.subset(level)
    times = spec.schedule.dates[subset - 1]
    chunk = max(1, BATCH_ELEMENTS // subset.size)
    out = np.empty(size, dtype=np.float64)
    for start in range(0, size, chunk):
        stop = min(size, start + chunk)
        forwards = sampler.sample_on(times, rng, stop - start)
        out[start:stop] = _differences_from_forwards(ls, spec, forwards, level)
    return out, size * int(subset.size)


def _rmlmc_worker(ls, spec, sampler, dist: LevelDistribution, n: int, stream) -> Tuple[RunStatistics, np.ndarray]:
    rng = np.random.default_rng(stream)
    levels = dist.draw(rng, n)
    counts = np.bincount(levels, minlength=ls.max_level + 1)
    stats = RunStatistics()
    for level, count in enumerate(counts):
        if count == 0:
            continue
        values, nodes = sample_level_difference_exact(ls, spec, sampler, level, rng, int(count))
        stats.update(values / dist.prob(level), cost=nodes)
    return stats, counts


def rmlmc_estimate(
    ls: LevelStructure,
    spec: OptionSpec,
    sampler,
    n: int,
    seed: SeedLike = None,
    workers: int = 1,
    truncate: bool = True,
) -> EstimateReport:
    """
    Unbiased randomized multilevel estimator on exact paths.

    Each replication draws N with p_l proportional to 2^{-3l/2} and returns
    (U_N - U_{N-1}) / p_N. With `truncate` the law lives on 0..L only, since
    the differences vanish above L.
    """
    _check_n(n)
    workers = _check_workers(workers, n)
    dist = LevelDistribution.unbiased(2.0, ls.max_level if truncate else None)
    streams = _root_sequence(seed).spawn(workers)

    def task(share, stream):
        return _rmlmc_worker(ls, spec, sampler, dist, share, stream)

    results = _fan_out(task, _split(n, workers), streams, workers)
    stats = merge_all([r[0] for r in results])
    counts = np.zeros(max(r[1].size for r in results), dtype=np.int64)
    for _, c in results:
        counts[: c.size] += c
    logger.debug(f"rmlmc level counts {counts.tolist()}")
    return _report(
        "rmlmc",
        spec,
        n,
        stats.mean,
        stats.variance / stats.count,
        stats.cost,
        stats.variance,
        level_counts=counts.tolist(),
    )


###############################################################################
# Multilevel
###############################################################################
def mlmc_allocation(variances: Sequence[float], sizes: Sequence[int], budget: float) -> np.ndarray:
    """
    n_l = floor(1 + budget sqrt(mu_l / |J_l|) / sum_l' sqrt(mu_l' |J_l'|)).

    A zero denominator (all pilot variances zero) yields n_l = 1 everywhere.
    """
    mu = np.maximum(np.asarray(variances, dtype=np.float64), 0.0)
    sizes = np.asarray(sizes, dtype=np.float64)
    denominator = float(np.sqrt(mu * sizes).sum())
    if denominator == 0.0:
        logger.warning("all pilot variances are zero, using one difference per level")
        return np.ones(mu.size, dtype=np.int64)
    return np.floor(1.0 + budget * np.sqrt(mu / sizes) / denominator).astype(np.int64)


def _levels_worker(ls, spec, sampler, counts: Sequence[int], stream) -> List[RunStatistics]:
    rng = np.random.default_rng(stream)
    per_level = []
    for level, count in enumerate(counts):
        stats = RunStatistics()
        if count:
            values, nodes = sample_level_difference_exact(ls, spec, sampler, level, rng, int(count))
            stats.update(values, cost=nodes)
        per_level.append(stats)
    return per_level


def _per_level(ls, spec, sampler, counts: Sequence[int], stream, workers: int) -> List[RunStatistics]:
    counts = [int(c) for c in counts]
    shares = [list(s) for s in zip(*(_split(c, workers) for c in counts))]

    def task(share, child):
        return _levels_worker(ls, spec, sampler, share, child)

    results = _fan_out(task, shares, stream.spawn(workers), workers)
    return [merge_all([r[level] for r in results]) for level in range(len(counts))]


def mlmc_estimate(
    ls: LevelStructure,
    spec: OptionSpec,
    sampler,
    pilot_n: int = DEFAULT_PILOT_N,
    budget_multiplier: float = DEFAULT_BUDGET_MULTIPLIER,
    seed: SeedLike = None,
    outer_n: int = 1,
    workers: int = 1,
) -> EstimateReport:
    """
    Classical multilevel estimator on exact paths.

    A pilot of `pilot_n` differences per level estimates mu_l; the budget
    `budget_multiplier * m` is spread with `mlmc_allocation`. The second phase
    simulates `outer_n * n_l` fresh differences per level, which is the same as
    averaging `outer_n` independent copies of the estimator.

    Args:
        ls: Level structure.
        spec: Option specification.
        sampler: Exact forward sampler.
        pilot_n: Pilot differences per level.
        budget_multiplier: Budget factor on m.
        seed: Root seed.
        outer_n: Independent copies of the multilevel mean.
        workers: Worker processes.

    Returns:
        EstimateReport; the pilot is included in the cost.
    """
    _check_n(pilot_n)
    if outer_n < 1:
        raise ValueError(f"outer_n must be >= 1, got {outer_n}")
    workers = _check_workers(workers, pilot_n)
    pilot_stream, main_stream = _root_sequence(seed).spawn(2)
    levels = ls.max_level + 1

    pilot = _per_level(ls, spec, sampler, [pilot_n] * levels, pilot_stream, workers)
    mu = np.array([s.variance for s in pilot])
    allocation = mlmc_allocation(mu, ls.subset_sizes(), budget_multiplier * ls.m)
    logger.debug(f"mlmc pilot variances {np.round(mu, 8).tolist()} allocation {allocation.tolist()}")

    counts = allocation * outer_n
    phase = _per_level(ls, spec, sampler, counts, main_stream, workers)
    mean = float(sum(s.mean for s in phase))
    # levels with fewer than two samples fall back to the pilot variance
    level_var = np.array([s.variance if s.count >= 2 else mu[i] for i, s in enumerate(phase)])
    variance_of_mean = float((level_var / counts).sum())
    cost = sum(s.cost for s in pilot) + sum(s.cost for s in phase)
    return _report(
        "mlmc",
        spec,
        outer_n,
        mean,
        variance_of_mean,
        cost,
        variance_of_mean * outer_n,
        level_counts=counts.tolist(),
    )


###############################################################################
# Coupled schemes
###############################################################################
def sample_level_difference_coupled(
    ls: LevelStructure, spec: OptionSpec, sde: Sde, level: int, rng, size: int = 1, milstein: bool = True
) -> Tuple[np.ndarray, int]:
    """Û_l - Û_{l-1} from one Brownian path per copy; Û_{-1} = 0. Levels above L keep refining the grid."""
    scheme = milstein_coupled if milstein else euler_coupled
    fine_subset = ls.subset(level)
    coarse_subset = ls.subset(level - 1) if level > 0 else fine_subset
    grid_points = fine_subset.size + 2**level + 1
    chunk = max(1, BATCH_ELEMENTS // grid_points)
    out = np.empty(size, dtype=np.float64)
    nodes = 0
    for start in range(0, size, chunk):
        stop = min(size, start + chunk)
        paths = scheme(sde, spec.schedule, fine_subset, coarse_subset, level, rng, stop - start)
        u_fine = centered_payoff(spec, ls.functional(level).evaluate(spec.f0, paths.fine))
        if level == 0:
            out[start:stop] = u_fine
        else:
            u_coarse = centered_payoff(spec, ls.functional(level - 1).evaluate(spec.f0, paths.coarse))
            out[start:stop] = u_fine - u_coarse
        nodes += paths.nodes * (stop - start)
    return out, nodes


def _coupled_worker(ls, spec, sde, dist: LevelDistribution, n: int, stream, milstein: bool, cutoff: Optional[int]):
    rng = np.random.default_rng(stream)
    levels = dist.draw(rng, n)
    counts = np.bincount(levels)
    stats = RunStatistics()
    for level, count in enumerate(counts):
        if count == 0:
            continue
        if cutoff is not None and level > cutoff:
            stats.update(np.zeros(int(count)))
            continue
        values, nodes = sample_level_difference_coupled(ls, spec, sde, level, rng, int(count), milstein)
        stats.update(values / dist.prob(level), cost=nodes)
    return stats, counts


def _run_coupled(ls, spec, sde, dist, n, seed, workers, milstein, cutoff=None):
    _check_n(n)
    workers = _check_workers(workers, n)
    streams = _root_sequence(seed).spawn(workers)

    def task(share, stream):
        return _coupled_worker(ls, spec, sde, dist, share, stream, milstein, cutoff)

    results = _fan_out(task, _split(n, workers), streams, workers)
    counts = np.zeros(max(r[1].size for r in results), dtype=np.int64)
    for _, c in results:
        counts[: c.size] += c
    return merge_all([r[0] for r in results]), counts


def rmlmc_coupled_estimate(
    ls: LevelStructure,
    spec: OptionSpec,
    sde: Sde,
    beta: float = 2.0,
    n: int = 2,
    seed: SeedLike = None,
    workers: int = 1,
) -> EstimateReport:
    """Unbiased randomized estimator on Milstein paths, with no truncation of the level law."""
    if not 1.0 < beta <= 2.0:
        raise ValueError(f"the unbiased coupled estimator needs 1 < beta <= 2 (Milstein), got {beta}")
    dist = LevelDistribution.unbiased(beta)
    stats, counts = _run_coupled(ls, spec, sde, dist, n, seed, workers, milstein=True)
    logger.debug(f"rmlmc-milstein level counts {counts.tolist()}")
    return _report(
        "rmlmc-milstein",
        spec,
        n,
        stats.mean,
        stats.variance / stats.count,
        stats.cost,
        stats.variance,
        level_counts=counts.tolist(),
    )


def truncation_level(epsilon: float) -> int:
    """L_eps = ceil(2 log2(1 / eps))."""
    if not 0.0 < epsilon < 0.5:
        raise ValueError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    return math.ceil(2.0 * math.log2(1.0 / epsilon))


def estimate_bias_constant(
    spec: OptionSpec, sde: Sde, rng: np.random.Generator, pilot_n: int = 2000, levels: Sequence[int] = (1, 2, 3, 4)
) -> Tuple[float, float]:
    """
    Rough Euler constants from a small pilot at maturity.

    ĉ2 is the largest 2^l E|F̂_l(T) - F̂_{l-1}(T)|^2 over `levels`; ĉ3 is
    2 (ĉ2 + var F̂(T)) using the finest pilot level.

    Returns:
        (ĉ2, ĉ3)
    """
    last = np.array([spec.schedule.m])
    c2 = 0.0
    paths = None
    for level in levels:
        paths = euler_coupled(sde, spec.schedule, last, last, level, rng, pilot_n)
        gap = paths.fine[:, -1] - paths.coarse[:, -1]
        c2 = max(c2, float(2.0**level * np.mean(gap * gap)))
    var_fm = float(np.var(paths.fine[:, -1], ddof=1))
    return c2, 2.0 * (c2 + var_fm)


def rmlmc_truncated_estimate(
    ls: LevelStructure,
    spec: OptionSpec,
    sde: Sde,
    epsilon: float,
    n: int,
    seed: SeedLike = None,
    workers: int = 1,
    pilot_n: int = 2000,
) -> EstimateReport:
    """
    Biased randomized estimator on Euler paths.

    N has law p_l = 2^{-(l+1)}; replications with N > L_eps contribute 0 at no
    cost. The report carries the squared-bias bound ĉ3 κ² ε². The pilot that
    estimates ĉ3 is not counted in the cost.
    """
    cutoff = truncation_level(epsilon)
    bias_stream, main_stream = _root_sequence(seed).spawn(2)
    stats, counts = _run_coupled(
        ls, spec, sde, LevelDistribution.halving(), n, main_stream, workers, milstein=False, cutoff=cutoff
    )
    _, c3 = estimate_bias_constant(spec, sde, np.random.default_rng(bias_stream), pilot_n)
    bias_bound = c3 * spec.payoff.lipschitz_bound**2 * epsilon**2
    logger.debug(f"euler truncation L={cutoff} counts {counts.tolist()} c3={c3:.4g}")
    return _report(
        "rmlmc-euler-trunc",
        spec,
        n,
        stats.mean,
        stats.variance / stats.count,
        stats.cost,
        stats.variance,
        bias_bound=float(bias_bound),
        level_counts=counts.tolist(),
    )


###############################################################################
# Plain Monte Carlo
###############################################################################
def _plain_worker(spec: OptionSpec, sampler, n: int, stream) -> RunStatistics:
    rng = np.random.default_rng(stream)
    schedule = spec.schedule
    chunk = max(1, BATCH_ELEMENTS // schedule.m)
    stats = RunStatistics()
    for start in range(0, n, chunk):
        size = min(chunk, n - start)
        forwards = sampler.sample_on(schedule.dates, rng, size)
        stats.update(centered_payoff(spec, forwards @ schedule.weights), cost=size * schedule.m)
    return stats


def plain_mc_estimate(
    spec: OptionSpec, sampler, n: int, seed: SeedLike = None, workers: int = 1
) -> EstimateReport:
    """Full-path Monte Carlo of f(A) - a; also reports the payoff variance var f(A)."""
    _check_n(n)
    workers = _check_workers(workers, n)
    streams = _root_sequence(seed).spawn(workers)

    def task(share, stream):
        return _plain_worker(spec, sampler, share, stream)

    stats = merge_all(_fan_out(task, _split(n, workers), streams, workers))
    return _report(
        "mc",
        spec,
        n,
        stats.mean,
        stats.variance / stats.count,
        stats.cost,
        stats.variance,
        payoff_variance=float(stats.variance),
    )


def variance_reduction_factor(report: EstimateReport, spec: OptionSpec, payoff_variance: float) -> float:
    """VRF = m e^{-2rT} var f(A) / (Cost x Std^2)."""
    denominator = report["cost"] * report["std"] ** 2
    if denominator == 0.0:
        return float("inf")
    return spec.schedule.m * spec.discount**2 * payoff_variance / denominator
