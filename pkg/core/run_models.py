from typing import Any, Dict, Literal, Optional, TypedDict

from pydantic import BaseModel, ConfigDict, Field, model_validator

ModelId = Literal["bs", "merton", "sqr"]
OptionKind = Literal["avg-price-call", "avg-strike-call"]
Method = Literal["mc", "rmlmc", "mlmc", "rmlmc-milstein", "rmlmc-euler-trunc"]

CSV_COLUMNS = ["method", "model", "option", "m", "n", "price", "std", "cost", "work_norm_var", "vrf"]


class ExperimentConfig(BaseModel):
    """
    One table row to compute.

    `params` holds the complete model parameter set (see models.py). For
    MLMC, `n` counts independent copies of the multilevel mean; for every
    other method it counts replications.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelId
    params: Dict[str, Any] = Field(default_factory=dict)
    option: OptionKind
    strike: Optional[float] = Field(default=None, ge=0.0)
    m: int = Field(ge=1)
    method: Method
    n: int = Field(ge=1)
    pilot_n: int = Field(default=10_000, ge=2)
    budget_multiplier: float = Field(default=30.0, gt=0.0)
    epsilon: Optional[float] = Field(default=None, gt=0.0, lt=0.5)
    seed: int = Field(default=42, ge=0, lt=2**64)
    workers: int = Field(default=1, ge=1)
    baseline_n: int = Field(default=100_000, ge=0)  # 0 skips the VRF
    truncate_levels: bool = True

    @model_validator(mode="after")
    def _compatible(self) -> "ExperimentConfig":
        if self.option == "avg-price-call" and self.strike is None:
            raise ValueError("avg-price-call needs a strike")
        if self.option == "avg-strike-call" and self.strike is not None:
            raise ValueError("avg-strike-call takes no strike")
        if self.option == "avg-strike-call" and self.m < 2:
            raise ValueError("avg-strike-call needs m >= 2")
        if (self.method == "rmlmc-euler-trunc") != (self.epsilon is not None):
            raise ValueError("epsilon is required by rmlmc-euler-trunc and accepted by no other method")
        if self.method != "mlmc" and self.n < 2:
            raise ValueError(f"{self.method} needs n >= 2")
        if self.baseline_n == 1:
            raise ValueError("baseline_n must be 0 (no VRF) or at least 2")
        return self


class TableRow(TypedDict):
    method: str
    model: str
    option: str
    m: int
    n: int
    price: float
    std: float
    cost: int
    work_norm_var: float
    vrf: float  # nan when no baseline was run
