"""
Euler and Milstein schemes for scalar driftless SDEs dF = b(F, t) dW on the
merged grid G(J, l), with consecutive levels coupled through one Brownian path.
"""

from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np
from loguru import logger

from errors import SimulationError
from schedule import MonitoringSchedule

# relative tolerance used to merge a monitoring date with a dyadic point
GRID_TOL = 1e-12


def _linear(x: np.ndarray, t: float, sigma: float) -> np.ndarray:
    return sigma * x


def _constant(x: np.ndarray, t: float, value: float) -> np.ndarray:
    return np.full_like(x, value)


@dataclass(frozen=True)
class Sde:
    diffusion: Callable[[np.ndarray, float], np.ndarray]
    diffusion_dx: Optional[Callable[[np.ndarray, float], np.ndarray]]  # Milstein only
    f0: float


def black_scholes_sde(sigma: float, f0: float) -> Sde:
    """dF = sigma F dW, so b(x) = sigma x and b'(x) = sigma."""
    return Sde(diffusion=partial(_linear, sigma=sigma), diffusion_dx=partial(_constant, value=sigma), f0=f0)


def constant_sde(value: float, f0: float) -> Sde:
    return Sde(diffusion=partial(_constant, value=value), diffusion_dx=partial(_constant, value=0.0), f0=f0)


@dataclass(frozen=True)
class MergedGrid:
    level: int
    subset: np.ndarray  # J, 1-based date indices
    times: np.ndarray  # sorted grid, starting at 0
    positions: np.ndarray  # grid position of t_j for every j in J

    @property
    def steps(self) -> int:
        return int(self.times.size - 1)


def build_merged_grid(schedule: MonitoringSchedule, subset, level: int) -> MergedGrid:
    """
    G(J, l) = {t_j : j in J} ∪ {i 2^-l T : 0 <= i <= 2^l}.

    Points closer than GRID_TOL * T are merged, keeping the smaller one.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    if subset.size and (subset.min() < 1 or subset.max() > schedule.m):
        raise ValueError(f"subset must lie in 1..{schedule.m}")

    maturity = schedule.maturity
    dyadic = maturity * np.arange(2**level + 1, dtype=np.float64) / 2**level
    merged = np.sort(np.concatenate((dyadic, schedule.dates[subset - 1])))
    keep = np.concatenate(([True], np.diff(merged) > GRID_TOL * maturity))
    times = merged[keep]
    positions = np.searchsorted(times, schedule.dates[subset - 1] - GRID_TOL * maturity, side="left")
    return MergedGrid(level=level, subset=subset, times=times, positions=positions)


@dataclass(frozen=True)
class CoupledPaths:
    coarse: Optional[np.ndarray]  # (size, |J_coarse|) on G(J_coarse, l-1); None at level 0
    fine: np.ndarray  # (size, |J_fine|) on G(J_fine, l)
    fine_grid: MergedGrid
    coarse_grid: Optional[MergedGrid]
    brownian_increments: np.ndarray  # (size, fine steps)
    coarse_increments: Optional[np.ndarray]  # (size, coarse steps)
    nodes: int  # grid states stepped per path, both grids


def aggregate_increments(increments: np.ndarray, fine_times: np.ndarray, coarse_times: np.ndarray) -> np.ndarray:
    """Sum the fine Brownian increments over every coarse grid interval."""
    tol = GRID_TOL * fine_times[-1]
    bounds = np.searchsorted(fine_times, coarse_times - tol, side="left")
    if np.any(np.abs(fine_times[bounds] - coarse_times) > tol):
        raise ValueError("coarse grid is not contained in the fine grid")
    out = np.empty((increments.shape[0], bounds.size - 1), dtype=np.float64)
    for k in range(bounds.size - 1):
        out[:, k] = increments[:, bounds[k] : bounds[k + 1]].sum(axis=1)
    return out


def _step(sde: Sde, times: np.ndarray, increments: np.ndarray, milstein: bool) -> np.ndarray:
    """States on every grid point after t=0, shape (size, steps)."""
    size, steps = increments.shape
    dt = np.diff(times)
    states = np.empty((size, steps), dtype=np.float64)
    x = np.full(size, sde.f0, dtype=np.float64)
    for k in range(steps):
        dw = increments[:, k]
        b = sde.diffusion(x, times[k])
        x_next = x + b * dw
        if milstein:
            x_next = x_next + 0.5 * b * sde.diffusion_dx(x, times[k]) * (dw * dw - dt[k])
        x = x_next
        states[:, k] = x
    if not np.all(np.isfinite(x)):
        raise SimulationError(f"scheme produced a non-finite state after {steps} steps")
    return states


def _coupled(
    sde: Sde,
    schedule: MonitoringSchedule,
    j_fine,
    j_coarse,
    level: int,
    rng: np.random.Generator,
    size: int,
    milstein: bool,
) -> CoupledPaths:
    if milstein and sde.diffusion_dx is None:
        raise ValueError("Milstein needs the derivative of the diffusion coefficient")
    fine_grid = build_merged_grid(schedule, j_fine, level)
    dt = np.diff(fine_grid.times)
    increments = np.sqrt(dt) * rng.standard_normal((size, dt.size))
    fine_states = _step(sde, fine_grid.times, increments, milstein)
    # position 0 of the grid is t=0, which is not stored in the states
    fine = fine_states[:, fine_grid.positions - 1]

    if level == 0:
        return CoupledPaths(
            coarse=None,
            fine=fine,
            fine_grid=fine_grid,
            coarse_grid=None,
            brownian_increments=increments,
            coarse_increments=None,
            nodes=fine_grid.steps,
        )

    j_coarse = np.asarray(j_coarse, dtype=np.int64)
    if not np.all(np.isin(j_coarse, fine_grid.subset)):
        raise ValueError("coarse subset must be contained in the fine subset")
    coarse_grid = build_merged_grid(schedule, j_coarse, level - 1)
    coarse_increments = aggregate_increments(increments, fine_grid.times, coarse_grid.times)
    coarse_states = _step(sde, coarse_grid.times, coarse_increments, milstein)
    return CoupledPaths(
        coarse=coarse_states[:, coarse_grid.positions - 1],
        fine=fine,
        fine_grid=fine_grid,
        coarse_grid=coarse_grid,
        brownian_increments=increments,
        coarse_increments=coarse_increments,
        nodes=fine_grid.steps + coarse_grid.steps,
    )


def euler_coupled(sde, schedule, j_fine, j_coarse, level, rng, size=1) -> CoupledPaths:
    """
    Euler paths at levels l and l-1 driven by one Brownian path.

    Args:
        sde: Scalar driftless SDE.
        schedule: Monitoring schedule providing the dates and T.
        j_fine: Date indices J observed on the fine path, grid G(J, l).
        j_coarse: Date indices J' ⊆ J observed on the coarse path, grid G(J', l-1).
        level: l; at l = 0 only the fine path is produced.
        rng: Generator owning all randomness.
        size: Number of independent coupled pairs.

    Returns:
        CoupledPaths with forwards restricted to the requested dates.
    """
    logger.trace(f"euler level={level} |J|={np.size(j_fine)} size={size}")
    return _coupled(sde, schedule, j_fine, j_coarse, level, rng, size, milstein=False)


def milstein_coupled(sde, schedule, j_fine, j_coarse, level, rng, size=1) -> CoupledPaths:
    """Same coupling as `euler_coupled` with the correction 0.5 b b' (dW^2 - dt) per step."""
    logger.trace(f"milstein level={level} |J|={np.size(j_fine)} size={size}")
    return _coupled(sde, schedule, j_fine, j_coarse, level, rng, size, milstein=True)
