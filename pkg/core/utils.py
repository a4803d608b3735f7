import itertools
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, TextIO, Union

import jsonlines as jsl
import pandas as pd
import yaml
from dotenv import dotenv_values

from run_models import CSV_COLUMNS, ExperimentConfig, TableRow

CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "tables.yaml"


def load_config(config_path: Union[str, Path] = CONFIG_PATH) -> dict:
    # model defaults + table presets
    with open(config_path, "r") as f:
        config = yaml.safe_load(f)

    return config


def load_params(params_path: Union[str, Path]) -> Dict[str, str]:
    """Flat key=value parameter file; values stay strings and are coerced by the pydantic models."""
    if not Path(params_path).is_file():
        raise FileNotFoundError(f"parameter file not found: {params_path}")
    return {k: v for k, v in dotenv_values(params_path).items() if v is not None}


def model_params(config: dict, model: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    if model not in config["models"]:
        raise ValueError(f"no default parameters for model '{model}'")
    return {**config["models"][model], **(overrides or {})}


def mlmc_outer_n(n: int, m: int) -> int:
    # multilevel copies that match the cost of n randomized replications
    return max(1, n // (10 * m))


def generate_experiments(
    config: dict,
    table: int,
    n: Optional[int] = None,
    seed: int = 42,
    workers: int = 1,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
    **extra,
) -> List[ExperimentConfig]:
    """
    Expand a table preset into one ExperimentConfig per row by taking the
    Cartesian product of its lists:
      - models
      - options
      - m
      - strikes (average price rows only)
      - methods

    Args:
        config: Loaded YAML configuration.
        table: Preset number.
        n: Randomized replication count; defaults to the preset's n.
        seed: Seed shared by every row.
        workers: Worker processes per row.
        overrides: Per-model parameter overrides.
        **extra: Further ExperimentConfig fields (pilot_n, budget_multiplier, baseline_n).

    Returns:
        Configs in table order.
    """
    presets = config["tables"]
    if table not in presets:
        raise ValueError(f"unknown table {table}, expected one of {sorted(presets)}")
    preset = presets[table]
    n = int(n or preset["n"])
    overrides = overrides or {}
    extra = {"baseline_n": preset.get("baseline_n", 100_000), **extra}

    experiments = []
    for model, option, m, strike, method in itertools.product(
        preset["models"],
        preset["options"],
        preset["m"],
        preset.get("strikes", [None]),
        preset["methods"],
    ):
        m = int(m)
        experiment = {
            "model": model,
            "params": model_params(config, model, overrides.get(model)),
            "option": option,
            "strike": strike if option == "avg-price-call" else None,
            "m": m,
            "method": method,
            "n": mlmc_outer_n(n, m) if method == "mlmc" else n,
            "seed": seed,
            "workers": workers,
            **extra,
        }
        experiments.append(ExperimentConfig(**experiment))

    # strike lists only apply to average price rows
    unique = list({c.model_dump_json(): c for c in experiments}.values())
    return unique


def _frame(rows: Iterable[TableRow]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=CSV_COLUMNS)


def write_rows_csv(rows: Iterable[TableRow], target: Union[str, Path, TextIO]) -> None:
    _frame(rows).to_csv(target, index=False, float_format="%.6g", na_rep="")


def read_rows_csv(source: Union[str, Path, TextIO]) -> List[TableRow]:
    df = pd.read_csv(source)
    rows = []
    for record in df.to_dict(orient="records"):
        rows.append(
            TableRow(
                method=str(record["method"]),
                model=str(record["model"]),
                option=str(record["option"]),
                m=int(record["m"]),
                n=int(record["n"]),
                price=float(record["price"]),
                std=float(record["std"]),
                cost=int(record["cost"]),
                work_norm_var=float(record["work_norm_var"]),
                vrf=float(record["vrf"]),
            )
        )
    return rows


def format_rows_text(rows: Iterable[TableRow]) -> str:
    df = _frame(rows)
    return df.to_string(index=False, float_format=lambda x: f"{x:.6g}", na_rep="-")


def append_jsonl(path: Union[str, Path], rows: Iterable[TableRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with jsl.open(path, mode="a") as writer:
        for row in rows:
            writer.write({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
