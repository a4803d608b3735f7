"""
Monitoring schedule and nested level sets

Builds the subsets J_0 ⊆ J_1 ⊆ ... ⊆ J_L of monitoring-date indices and the
trapezoidal linear functionals A_l that replace every unsimulated forward by
the average of its two simulated neighbours. Construction is O(m) overall.

Indices follow the 1-based date numbering: index j refers to t_j, and index 0
refers to the valuation date t_0 = 0 where the forward F_0 is known.
"""

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from loguru import logger


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class MonitoringSchedule:
    dates: np.ndarray  # t_1 < ... < t_m = T
    weights: np.ndarray  # signed, sum of absolute values is 1

    @property
    def m(self) -> int:
        return int(self.dates.size)

    @property
    def maturity(self) -> float:
        return float(self.dates[-1])

    @property
    def weight_total(self) -> float:
        """W(1,m), the signed sum of the weights; rounding residue of a balanced schedule is 0."""
        total = math.fsum(self.weights)
        if abs(total) <= self.m * np.finfo(np.float64).eps:
            return 0.0
        return total


@dataclass(frozen=True)
class CoarseFunctional:
    """
    Sparse linear functional A_l = sum_j coefficients[j] * F_j.

    `indices` starts with 0 followed by the sorted members of J_l; the
    coefficient at position 0 multiplies the deterministic F_0.
    """

    level: int
    indices: np.ndarray
    coefficients: np.ndarray

    @property
    def simulated_indices(self) -> np.ndarray:
        return self.indices[1:]

    @property
    def f0_coefficient(self) -> float:
        return float(self.coefficients[0])

    def as_dict(self) -> Dict[int, float]:
        return {int(j): float(c) for j, c in zip(self.indices, self.coefficients)}

    def evaluate(self, f0: float, forwards: np.ndarray) -> np.ndarray:
        """
        Apply the functional to simulated forwards.

        Args:
            f0: Initial forward price.
            forwards: Array of shape (n_paths, |J_l|), columns ordered like
                `simulated_indices`.

        Returns:
            Array of shape (n_paths,).
        """
        return self.coefficients[0] * f0 + forwards @ self.coefficients[1:]


@dataclass(frozen=True)
class LevelStructure:
    max_level: int
    subsets: Tuple[np.ndarray, ...]  # J_0 .. J_L
    functionals: Tuple[CoarseFunctional, ...]  # A_0 .. A_L
    signed_prefix: np.ndarray  # W(1,j), j = 0..m
    abs_prefix: np.ndarray  # W'(1,j), j = 0..m

    @property
    def m(self) -> int:
        return int(self.signed_prefix.size - 1)

    def subset(self, level: int) -> np.ndarray:
        return self.subsets[min(level, self.max_level)]

    def subset_sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.subsets], dtype=np.int64)

    def pairs(self, level: int) -> np.ndarray:
        """Consecutive pairs (i, k) of {0} ∪ J_l as an array of shape (|J_l|, 2)."""
        idx = self.functional(level).indices
        return np.column_stack([idx[:-1], idx[1:]])

    def pair_weights(self, level: int) -> np.ndarray:
        """W(i+1, k-1) for every consecutive pair at the given level."""
        return _gap_sums(self.signed_prefix, self.functional(level).indices)

    def pair_abs_weights(self, level: int) -> np.ndarray:
        """W'(i+1, k-1) for every consecutive pair at the given level."""
        return _gap_sums(self.abs_prefix, self.functional(level).indices)

    def functional(self, level: int) -> CoarseFunctional:
        return self.functionals[min(level, self.max_level)]


def build_schedule(dates: Sequence[float], weights: Sequence[float]) -> MonitoringSchedule:
    """
    Validate monitoring dates and rescale the weights so that sum |w_j| = 1.

    Args:
        dates: Strictly increasing positive times t_1..t_m in years.
        weights: Non-zero signed weights w_1..w_m, in any scale.

    Returns:
        MonitoringSchedule with normalized weights and the original signs.
    """
    dates_arr = np.asarray(dates, dtype=np.float64).ravel()
    weights_arr = np.asarray(weights, dtype=np.float64).ravel()

    if dates_arr.size == 0:
        raise ValueError("schedule needs at least one monitoring date")
    if dates_arr.size != weights_arr.size:
        raise ValueError(
            f"dates and weights differ in length ({dates_arr.size} != {weights_arr.size})"
        )
    if not np.all(np.isfinite(dates_arr)) or not np.all(np.isfinite(weights_arr)):
        raise ValueError("dates and weights must be finite")
    if dates_arr[0] <= 0.0:
        raise ValueError(f"dates must be positive, got t_1={dates_arr[0]}")
    if np.any(np.diff(dates_arr) <= 0.0):
        raise ValueError("dates must be strictly increasing")

    total = np.abs(weights_arr).sum()
    if total == 0.0:
        raise ValueError("weight vector is identically zero")
    if np.any(weights_arr == 0.0):
        raise ValueError("every weight must be non-zero")

    return MonitoringSchedule(
        dates=_frozen(dates_arr.copy()),
        weights=_frozen(weights_arr / total),
    )


def _max_level(m: int) -> int:
    # ceil(log2 m), exact for integers
    return (m - 1).bit_length()


def _gap_sums(prefix: np.ndarray, indices: np.ndarray) -> np.ndarray:
    # weight strictly between consecutive members i < k of {0} ∪ J
    return prefix[indices[1:] - 1] - prefix[indices[:-1]]


def _functional_for(
    level: int, subset: np.ndarray, weights: np.ndarray, signed_prefix: np.ndarray
) -> CoarseFunctional:
    indices = np.concatenate(([0], subset)).astype(subset.dtype, copy=False)
    coefficients = np.zeros(indices.size, dtype=np.float64)
    coefficients[1:] = weights[subset - 1]
    gaps = _gap_sums(signed_prefix, indices)
    coefficients[:-1] += 0.5 * gaps
    coefficients[1:] += 0.5 * gaps
    return CoarseFunctional(level=level, indices=_frozen(indices), coefficients=_frozen(coefficients))


def build_level_structure(schedule: MonitoringSchedule) -> LevelStructure:
    """
    Prefix sums, backward construction of J_l, then the
    per-level trapezoid coefficients.

    J_l is obtained by filtering J_{l+1} with the condition
    2^l W'(1,j-1) < floor(2^l W'(1,j)), evaluated in double precision.
    A boundary case misclassified by rounding changes the variance of the
    estimators, never their mean.
    """
    m = schedule.m
    max_level = _max_level(m)
    index_dtype = np.int32 if m < 2**31 - 1 else np.int64

    signed_prefix = np.concatenate(([0.0], np.cumsum(schedule.weights)))
    abs_prefix = np.concatenate(([0.0], np.cumsum(np.abs(schedule.weights))))
    # pinned to [0, 1] so that m always lands in J_0
    np.minimum(abs_prefix, 1.0, out=abs_prefix)
    abs_prefix[-1] = 1.0

    subsets = [np.empty(0, dtype=index_dtype)] * (max_level + 1)
    subsets[max_level] = np.arange(1, m + 1, dtype=index_dtype)
    for level in range(max_level - 1, -1, -1):
        above = subsets[level + 1]
        scale = float(2**level)
        keep = scale * abs_prefix[above - 1] < np.floor(scale * abs_prefix[above])
        # m is last in every subset and must survive rounding of W'(1, m-1)
        keep[-1] = True
        subsets[level] = above[keep]

    functionals = tuple(
        _functional_for(level, subset, schedule.weights, signed_prefix)
        for level, subset in enumerate(subsets)
    )
    logger.debug(
        f"level structure m={m} L={max_level} sizes={[s.size for s in subsets][:12]}"
    )
    return LevelStructure(
        max_level=max_level,
        subsets=tuple(_frozen(s) for s in subsets),
        functionals=functionals,
        signed_prefix=_frozen(signed_prefix),
        abs_prefix=_frozen(abs_prefix),
    )


def coarse_functional(ls: LevelStructure, schedule: MonitoringSchedule, level: int) -> CoarseFunctional:
    """A_l for l >= 0; levels above L return the exact functional A."""
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    if ls.m != schedule.m:
        raise ValueError("level structure was built for a different schedule")
    return ls.functional(level)
