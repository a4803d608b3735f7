import argparse
import math
import sys
from datetime import datetime
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import ValidationError
from tqdm import tqdm

from errors import SimulationError
from estimators import (
    EstimateReport,
    mlmc_estimate,
    plain_mc_estimate,
    rmlmc_coupled_estimate,
    rmlmc_estimate,
    rmlmc_truncated_estimate,
    variance_reduction_factor,
)
from models import ForwardSampler, build_sampler
from payoff import OptionSpec, average_price_call, average_strike_call, build_option_spec
from run_models import ExperimentConfig, TableRow
from schedule import LevelStructure, build_level_structure
from utils import (
    CONFIG_PATH,
    append_jsonl,
    format_rows_text,
    generate_experiments,
    load_config,
    load_params,
    mlmc_outer_n,
    model_params,
    write_rows_csv,
)

# default VRF baselines above this many simulated forwards are skipped
BASELINE_FORWARD_LIMIT = 10**10

Runner = Callable[[ExperimentConfig, LevelStructure, OptionSpec, ForwardSampler, np.random.SeedSequence], EstimateReport]

METHODS: Dict[str, Runner] = {
    "mc": lambda cfg, ls, spec, sampler, seed: plain_mc_estimate(spec, sampler, cfg.n, seed, cfg.workers),
    "rmlmc": lambda cfg, ls, spec, sampler, seed: rmlmc_estimate(
        ls, spec, sampler, cfg.n, seed, cfg.workers, truncate=cfg.truncate_levels
    ),
    "mlmc": lambda cfg, ls, spec, sampler, seed: mlmc_estimate(
        ls, spec, sampler, cfg.pilot_n, cfg.budget_multiplier, seed, outer_n=cfg.n, workers=cfg.workers
    ),
    "rmlmc-milstein": lambda cfg, ls, spec, sampler, seed: rmlmc_coupled_estimate(
        ls, spec, sampler.as_sde(), 2.0, cfg.n, seed, cfg.workers
    ),
    "rmlmc-euler-trunc": lambda cfg, ls, spec, sampler, seed: rmlmc_truncated_estimate(
        ls, spec, sampler.as_sde(), cfg.epsilon, cfg.n, seed, cfg.workers
    ),
}


def build_option(
    option: str, m: int, strike: Optional[float], sampler: ForwardSampler
) -> Tuple[OptionSpec, LevelStructure]:
    if option == "avg-price-call":
        schedule, payoff = average_price_call(m, strike, sampler.maturity, carry=sampler.carry)
    else:
        schedule, payoff = average_strike_call(m, sampler.maturity, carry=sampler.carry)
    spec = build_option_spec(schedule, payoff, sampler.f0, sampler.rate)
    return spec, build_level_structure(schedule)


@lru_cache(maxsize=64)
def baseline_payoff_variance(
    model: str, params: Tuple[Tuple[str, str], ...], option: str, strike: Optional[float], m: int,
    baseline_n: int, seed: int, workers: int,
) -> float:
    """var f(A) from a plain Monte Carlo run, shared by every method of a table row."""
    sampler = build_sampler(model, dict(params))
    spec, _ = build_option(option, m, strike, sampler)
    _, baseline_seed = np.random.SeedSequence(seed).spawn(2)
    logger.info(f"📏 baseline var f(A): {model} {option} m={m} n={baseline_n}")
    return plain_mc_estimate(spec, sampler, baseline_n, baseline_seed, workers)["payoff_variance"]


def run_experiment(cfg: ExperimentConfig) -> TableRow:
    """
    Price one configuration and assemble its table row.

    The baseline plain Monte Carlo run behind the VRF is not part of the
    row's cost. Rows are bit-identical for a fixed (seed, workers) pair.
    """
    sampler = build_sampler(cfg.model, cfg.params)
    if cfg.method in ("rmlmc-milstein", "rmlmc-euler-trunc"):
        # rejects models without a scalar SDE before any simulation
        sampler.as_sde()
    spec, ls = build_option(cfg.option, cfg.m, cfg.strike, sampler)
    estimator_seed, _ = np.random.SeedSequence(cfg.seed).spawn(2)

    report = METHODS[cfg.method](cfg, ls, spec, sampler, estimator_seed)

    vrf = math.nan
    if cfg.baseline_n >= 2:
        params = tuple(sorted((k, str(v)) for k, v in cfg.params.items()))
        payoff_var = baseline_payoff_variance(
            cfg.model, params, cfg.option, cfg.strike, cfg.m, cfg.baseline_n, cfg.seed, cfg.workers
        )
        vrf = variance_reduction_factor(report, spec, payoff_var)

    return TableRow(
        method=cfg.method,
        model=cfg.model,
        option=cfg.option,
        m=cfg.m,
        n=report["n"],
        price=report["price"],
        std=report["std"],
        cost=report["cost"],
        work_norm_var=report["work_norm_var"],
        vrf=float(vrf),
    )


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Multilevel Monte Carlo pricing of discretely monitored Asian options")
    parser.add_argument("--model", choices=["bs", "merton", "sqr"])
    parser.add_argument("--option", choices=["avg-price-call", "avg-strike-call"])
    parser.add_argument("--strike", type=float)
    parser.add_argument("--m", type=int)
    parser.add_argument("--method", choices=sorted(METHODS))
    parser.add_argument(
        "--n", type=int, help="replications; for --method mlmc the outer copies are max(1, n // (10 m))"
    )
    parser.add_argument("--pilot", type=int, default=10_000)
    parser.add_argument("--multiplier", type=float, default=30.0)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument(
        "--baseline-n", type=int, default=None,
        help="default 100000, skipped when m times 100000 exceeds 1e10; 0 skips the VRF",
    )
    parser.add_argument("--params", help="flat key=value model parameter file")
    parser.add_argument("--sqr-convention", choices=["carry", "spot"])
    parser.add_argument("--config", default=str(CONFIG_PATH), help="YAML with model defaults and table presets")
    parser.add_argument("--table", type=int, choices=range(1, 11), metavar="{1..10}")
    parser.add_argument("--csv", help="write the rows to this CSV file instead of stdout")
    parser.add_argument("--format", choices=["csv", "text"], default="csv")
    parser.add_argument("--jsonl", help="append every row to this JSON-lines file")
    return parser


def _overrides(args) -> Dict[str, str]:
    overrides = load_params(args.params) if args.params else {}
    if args.sqr_convention:
        overrides["f0_convention"] = args.sqr_convention
    return overrides


def _experiments(args, config: dict) -> List[ExperimentConfig]:
    extra = {"pilot_n": args.pilot, "budget_multiplier": args.multiplier}
    if args.baseline_n is not None:
        extra["baseline_n"] = args.baseline_n
    overrides = _overrides(args)

    if args.table:
        models = config["tables"][args.table]["models"]
        per_model = {}
        for model in models:
            keys = config["models"][model].keys()
            per_model[model] = {k: v for k, v in overrides.items() if k in keys}
        return generate_experiments(
            config, args.table, n=args.n, seed=args.seed, workers=args.workers, overrides=per_model, **extra
        )

    missing = [flag for flag in ("model", "option", "m", "method", "n") if getattr(args, flag) is None]
    if missing:
        raise ValueError("missing required flags: " + ", ".join(f"--{f}" for f in missing))
    if args.sqr_convention and args.model != "sqr":
        raise ValueError("--sqr-convention applies to --model sqr only")

    n = args.n
    if args.method == "mlmc" and args.m > 0:
        n = mlmc_outer_n(args.n, args.m)
        logger.info(f"🔁 mlmc: {args.n} replications -> {n} outer copies")
    if args.baseline_n is None and args.m > 0:
        baseline_n = ExperimentConfig.model_fields["baseline_n"].default
        if args.m * baseline_n > BASELINE_FORWARD_LIMIT:
            logger.warning(
                f"⚠️ skipping the VRF baseline: m={args.m} x {baseline_n} paths; pass --baseline-n to force it"
            )
            extra["baseline_n"] = 0
    return [
        ExperimentConfig(
            model=args.model,
            params=model_params(config, args.model, overrides),
            option=args.option,
            strike=args.strike,
            m=args.m,
            method=args.method,
            n=n,
            epsilon=args.epsilon,
            seed=args.seed,
            workers=args.workers,
            **extra,
        )
    ]


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command line entry point.

    Returns:
        0 on success, 2 on invalid flags or configuration, 1 on a failed simulation.
    """
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    sink = logger.add(f"logs/asian_mc_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log")
    try:
        return _run(args)
    finally:
        logger.remove(sink)


def _run(args) -> int:
    try:
        config = load_config(args.config)
        experiments = _experiments(args, config)
    except (ValueError, ValidationError, FileNotFoundError) as exc:
        logger.error(f"❌ invalid configuration: {exc}")
        return 2

    logger.info(f"🚀 running {len(experiments)} configuration(s)")
    rows = []
    try:
        for cfg in tqdm(experiments, desc="rows", disable=len(experiments) == 1):
            logger.info(f"▶️ {cfg.model} {cfg.option} m={cfg.m} {cfg.method} n={cfg.n}")
            rows.append(run_experiment(cfg))
    except ValueError as exc:
        logger.error(f"❌ invalid configuration: {exc}")
        return 2
    except SimulationError as exc:
        logger.error(f"💥 simulation failed: {exc}")
        return 1

    if args.csv:
        write_rows_csv(rows, args.csv)
        logger.info(f"✅ wrote {len(rows)} row(s) to {args.csv}")
    elif args.format == "text":
        sys.stdout.write(format_rows_text(rows) + "\n")
    else:
        write_rows_csv(rows, sys.stdout)
    if args.jsonl:
        append_jsonl(args.jsonl, rows)
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
