"""
Exact forward-price samplers.

Every sampler simulates the forward process F(t) for maturity T on an
arbitrary increasing set of monitoring times in time linear in the number of
times. Samplers are immutable; all randomness comes from the caller's
numpy Generator, so calls with distinct generators are independent and
reproducible.
"""

from __future__ import annotations

import math
from typing import Any, Dict, Literal, Protocol, Tuple, Type, runtime_checkable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from schemes import Sde, black_scholes_sde

###############################################################################
# Parameters
###############################################################################


class _Params(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class BlackScholesParams(_Params):
    spot: float = Field(gt=0.0)
    volatility: float = Field(gt=0.0)
    rate: float = 0.0
    dividend_yield: float = 0.0
    maturity: float = Field(gt=0.0)

    @property
    def carry(self) -> float:
        return self.rate - self.dividend_yield

    @property
    def f0(self) -> float:
        return self.spot * math.exp(self.carry * self.maturity)


class MertonParams(BlackScholesParams):
    jump_intensity: float = Field(ge=0.0)
    jump_log_mean: float = 0.0
    jump_log_sd: float = Field(default=0.0, ge=0.0)

    @property
    def jump_mean(self) -> float:
        """m̄ = E[Y] - 1, so that the compensated forward stays a martingale."""
        return math.exp(self.jump_log_mean + 0.5 * self.jump_log_sd**2) - 1.0


class SquareRootParams(_Params):
    spot: float = Field(gt=0.0)
    volatility: float = Field(gt=0.0)
    rate: float = 0.0
    maturity: float = Field(gt=0.0)
    f0_convention: Literal["carry", "spot"] = "carry"

    @property
    def carry(self) -> float:
        return self.rate if self.f0_convention == "carry" else 0.0

    @property
    def f0(self) -> float:
        return self.spot * math.exp(self.carry * self.maturity)


###############################################################################
# Sampler interface & registry
###############################################################################
@runtime_checkable
class ForwardSampler(Protocol):
    """All exact samplers implement sample_on(times, rng, size) -> (size, len(times))."""

    name: str
    f0: float
    rate: float
    carry: float
    maturity: float

    def sample_on(self, times: np.ndarray, rng: np.random.Generator, size: int = 1) -> np.ndarray: ...

    def second_moment_at_maturity(self) -> float: ...

    def as_sde(self) -> Sde: ...


# model id -> (parameter model, sampler class)
_REGISTRY: Dict[str, Tuple[Type[BaseModel], type]] = {}


def register(model_id: str, params_cls: Type[BaseModel]):
    """class decorator – add a sampler class to the registry under `model_id`"""

    def wrap(sampler_cls):
        if not all(hasattr(sampler_cls, attr) for attr in ("sample_on", "second_moment_at_maturity", "as_sde")):
            raise TypeError(f"{sampler_cls} must implement the ForwardSampler interface")
        _REGISTRY[model_id] = (params_cls, sampler_cls)
        return sampler_cls

    return wrap


def get_all_models() -> Dict[str, Tuple[Type[BaseModel], type]]:
    return _REGISTRY


def build_sampler(model_id: str, params: Dict[str, Any]) -> ForwardSampler:
    """Validate raw (possibly string-valued) parameters and build the sampler."""
    if model_id not in _REGISTRY:
        raise ValueError(f"unknown model '{model_id}', expected one of {sorted(_REGISTRY)}")
    params_cls, sampler_cls = _REGISTRY[model_id]
    return sampler_cls(params_cls(**params))


def _gaps(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1:
        raise ValueError("times must be one-dimensional")
    dt = np.diff(times, prepend=0.0)
    if times.size and dt.min() <= 0.0:
        raise ValueError("times must be positive and strictly increasing")
    return dt


def _diffusion_log_increments(sigma: float, dt: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return -0.5 * sigma**2 * dt + sigma * np.sqrt(dt) * normals


###############################################################################
# Black-Scholes
###############################################################################


def bs_sample_on(params: BlackScholesParams, times: np.ndarray, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Recursive lognormal steps, one standard normal per time and path."""
    dt = _gaps(times)
    normals = rng.standard_normal((size, dt.size))
    log_path = np.cumsum(_diffusion_log_increments(params.volatility, dt, normals), axis=1)
    return params.f0 * np.exp(log_path)


@register("bs", BlackScholesParams)
class BlackScholesSampler:
    name = "bs"

    def __init__(self, params: BlackScholesParams):
        self.params = params
        self.f0 = params.f0
        self.rate = params.rate
        self.carry = params.carry
        self.maturity = params.maturity

    def sample_on(self, times, rng, size=1):
        return bs_sample_on(self.params, times, rng, size)

    def second_moment_at_maturity(self) -> float:
        return self.f0**2 * math.exp(self.params.volatility**2 * self.maturity)

    def as_sde(self) -> Sde:
        return black_scholes_sde(self.params.volatility, self.f0)


###############################################################################
# Merton jump-diffusion
###############################################################################


def merton_sample_with_jumps(
    params: MertonParams, times: np.ndarray, rng: np.random.Generator, size: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact Merton forwards plus the number of jumps in every interval.

    The diffusion normals are drawn first, so with zero intensity the paths
    coincide with `bs_sample_on` for the same generator state.
    """
    dt = _gaps(times)
    normals = rng.standard_normal((size, dt.size))
    log_increments = _diffusion_log_increments(params.volatility, dt, normals)

    jump_counts = rng.poisson(params.jump_intensity * dt, size=(size, dt.size))
    jump_normals = rng.standard_normal((size, dt.size))
    # sum of k lognormal exponents ~ N(k * beta, k * gamma^2)
    log_jumps = jump_counts * params.jump_log_mean + np.sqrt(jump_counts) * params.jump_log_sd * jump_normals
    log_increments = log_increments - params.jump_intensity * params.jump_mean * dt + log_jumps

    return params.f0 * np.exp(np.cumsum(log_increments, axis=1)), jump_counts


def merton_sample_on(params: MertonParams, times: np.ndarray, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    return merton_sample_with_jumps(params, times, rng, size)[0]


@register("merton", MertonParams)
class MertonSampler:
    name = "merton"

    def __init__(self, params: MertonParams):
        self.params = params
        self.f0 = params.f0
        self.rate = params.rate
        self.carry = params.carry
        self.maturity = params.maturity

    def sample_on(self, times, rng, size=1):
        return merton_sample_on(self.params, times, rng, size)

    def second_moment_at_maturity(self) -> float:
        p = self.params
        jump_second = math.exp(2.0 * p.jump_log_mean + 2.0 * p.jump_log_sd**2)
        exponent = (
            p.volatility**2 * p.maturity
            - 2.0 * p.jump_intensity * p.jump_mean * p.maturity
            + p.jump_intensity * p.maturity * (jump_second - 1.0)
        )
        return self.f0**2 * math.exp(exponent)

    def as_sde(self) -> Sde:
        raise ValueError("Merton forwards have jumps and no scalar SDE discretization; use an exact method")


###############################################################################
# Square-Root diffusion
###############################################################################


def sqr_step(f_prev, dt: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """
    One exact transition of dF = sigma sqrt(F) dW over dt.

    F(t+dt) ~ (sigma^2 dt / 4) chi2_{2N} with N ~ Poisson(2 F(t) / (sigma^2 dt))
    and chi2_0 = 0; the chi-square is drawn as Gamma(N, scale 2). Zero is
    absorbing.
    """
    f_prev = np.asarray(f_prev, dtype=np.float64)
    alive = f_prev > 0.0
    counts = rng.poisson(np.where(alive, 2.0 * f_prev / (sigma**2 * dt), 0.0))
    chi2 = rng.gamma(shape=counts, scale=2.0)
    return np.where(counts > 0, 0.25 * sigma**2 * dt * chi2, 0.0)


def sqr_sample_on(params: SquareRootParams, times: np.ndarray, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    dt = _gaps(times)
    out = np.empty((size, dt.size), dtype=np.float64)
    state = np.full(size, params.f0)
    for k, step in enumerate(dt):
        state = sqr_step(state, step, params.volatility, rng)
        out[:, k] = state
    return out


@register("sqr", SquareRootParams)
class SquareRootSampler:
    name = "sqr"

    def __init__(self, params: SquareRootParams):
        self.params = params
        self.f0 = params.f0
        self.rate = params.rate
        self.carry = params.carry
        self.maturity = params.maturity

    def sample_on(self, times, rng, size=1):
        return sqr_sample_on(self.params, times, rng, size)

    def second_moment_at_maturity(self) -> float:
        return self.f0**2 + self.params.volatility**2 * self.f0 * self.maturity

    def as_sde(self) -> Sde:
        raise ValueError("no discretization with positive strong order is known for the Square-Root diffusion")


def variance_at_maturity(sampler: ForwardSampler) -> float:
    return sampler.second_moment_at_maturity() - sampler.f0**2
