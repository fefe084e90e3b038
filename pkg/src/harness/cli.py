"""Command-line entry point: rate tables, fine-limit analysis, two-user sweeps,
end-to-end simulations and lattice diagnostics.

    python -m src.harness.cli rate --config configs/chain3_simulation.yaml
    python -m src.harness.cli simulate --config configs/chain3_simulation.yaml --trials 500 --threads 8

Exit codes: 0 success, 2 configuration error, 3 infeasible plan.
"""
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.lattices.nested_chain import build_chain, chain_record
from src.loaders.csv_loader import monitored_run, write_table
from src.protocol.block_plan import plan_blocks
from src.protocol.key_agreement import prepare_protocol, run_protocol
from src.rates.rate_engine import classify_fine_limit, r_key, r_nn, two_user_rate
from src.transformers.evaluation import EvaluationReport, evaluate, trial_frame
from src.utils.errors import ConfigError, InfeasiblePlan
from src.validators.schema_validator import (
    CHAIN_SCHEMA,
    FINE_TABLE_SCHEMA,
    RATE_TABLE_SCHEMA,
    SWEEP_SCHEMA,
    TRIAL_SCHEMA,
    ExperimentConfig,
    LatticeDiagConfig,
    SweepConfig,
    load_config,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
DEFAULT_OUTPUT = 'output'


def cmd_rate(config: ExperimentConfig, out_dir: str) -> pd.DataFrame:
    tree = config.require_tree()
    report = r_key(tree, config.rate_constraints(), units=config.units, variant=config.variant)
    table = report.to_frame(tree)
    write_table(table, os.path.join(out_dir, 'rate_table.csv'), RATE_TABLE_SCHEMA, 'rate_table')
    logger.info(f"Best root {tree.name(report.best_subtree.root)!r}: r_key={report.r_key:.6f}, "
                f"alpha={report.alpha:.4f}")
    print(table.to_string(index=False))
    return table


def cmd_fine(config: ExperimentConfig, out_dir: str) -> pd.DataFrame:
    tree = config.require_tree()
    result = classify_fine_limit(tree)
    table = pd.DataFrame([{
        'r_key_fine': result.r_key_fine,
        'c_key': result.c_key,
        'gap': result.gap,
        'classification': result.kind.value,
        'witness_root': str(tree.name(result.witness.root)),
        'witness_members': result.witness.label(tree),
    }])
    write_table(table, os.path.join(out_dir, 'fine_limit.csv'), FINE_TABLE_SCHEMA, 'fine_limit')
    print(table.to_string(index=False))
    return table


def cmd_sweep_two_user(rho: float, r_total: float, steps: int, out_dir: str) -> pd.DataFrame:
    """Two terminals sharing a sum quantization rate; endpoints are excluded."""
    if r_total <= 0 or steps < 2:
        raise ConfigError(f"Need r_total > 0 and steps >= 2, got r_total={r_total}, steps={steps}")
    if not -1 < rho < 1:
        raise ConfigError(f"rho must lie in (-1, 1), got {rho}")
    rows = []
    for r_u in np.linspace(0.0, r_total, steps + 2)[1:-1]:
        r_v = r_total - r_u
        uv = max(0.0, two_user_rate(rho, r_u, r_v))
        vu = max(0.0, two_user_rate(rho, r_v, r_u))
        rows.append({
            'r_u': float(r_u),
            'r_v': float(r_v),
            'rate_uv': uv,
            'rate_vu': vu,
            'rate_max': max(uv, vu),
            'rnn_u': r_nn(rho, r_u),
            'rnn_v': r_nn(rho, r_v),
        })
    table = pd.DataFrame(rows)
    write_table(table, os.path.join(out_dir, 'two_user_sweep.csv'), SWEEP_SCHEMA, 'two_user_sweep')
    return table


def cmd_simulate(config: ExperimentConfig, out_dir: str) -> EvaluationReport:
    tree = config.require_tree()
    if config.n is None or config.p is None:
        raise ConfigError("simulate needs quantization.n and quantization.p")
    proto = config.protocol
    plan = plan_blocks(tree, config.rate_constraints(), config.n, config.p, proto.delta, n_out_cap=proto.n_out_cap)
    setup = prepare_protocol(plan, proto.seed, k_a=proto.k_a, coarse_dim=proto.coarse_dim,
                             sigma2_samples=proto.sigma2_samples, max_retries=proto.max_retries,
                             extractor_margin=proto.extractor_margin)
    outcomes = run_protocol(setup, proto.trials, threads=proto.threads)
    report = evaluate(outcomes, setup)

    write_table(trial_frame(outcomes, setup), os.path.join(out_dir, 'trials.csv'), TRIAL_SCHEMA, 'trials')
    write_table(report.to_frame(), os.path.join(out_dir, 'summary.csv'))
    write_table(report.accounting, os.path.join(out_dir, 'accounting.csv'))
    chains = pd.DataFrame([{'vertex': str(tree.name(v)), **chain_record(setup.chains[v])} for v in tree.vertices])
    write_table(chains, os.path.join(out_dir, 'chains.csv'), CHAIN_SCHEMA, 'chains')

    print(report.to_frame().to_string(index=False))
    if report.secrecy is not None:
        logger.info("Secrecy figures are DIAGNOSTIC: no finite-length pass/fail threshold applies")
    return report


def cmd_lattice_diag(diag: LatticeDiagConfig, seed: int, out_dir: str) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    chain = build_chain(diag.n, diag.p, diag.k_v, diag.k_a, [diag.rho], diag.delta, rng,
                        sigma2_samples=diag.samples)
    table = pd.DataFrame([chain_record(chain)])
    write_table(table, os.path.join(out_dir, 'lattice_diag.csv'), CHAIN_SCHEMA, 'lattice_diag')
    print(table.T.to_string(header=False))
    return table


def _sweep_settings(args, config: Optional[ExperimentConfig]) -> SweepConfig:
    base = config.sweep if config is not None and config.sweep is not None else None
    rho = args.rho if args.rho is not None else (base.rho if base else None)
    r_total = args.r_total if args.r_total is not None else (base.r_total if base else None)
    steps = args.steps if args.steps is not None else (base.steps if base else 21)
    if rho is None or r_total is None:
        raise ConfigError("sweep-two-user needs --rho and --r-total (or a sweep section)")
    return SweepConfig(rho=rho, r_total=r_total, steps=steps)


def _lattice_settings(args, config: Optional[ExperimentConfig]) -> LatticeDiagConfig:
    base: Dict[str, Any] = {}
    if config is not None and config.lattice is not None:
        base = dict(vars(config.lattice))
    for key in ('n', 'p', 'k_v', 'k_a', 'delta', 'samples', 'rho'):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    missing = [k for k in ('n', 'p', 'k_v') if k not in base]
    if missing:
        raise ConfigError(f"lattice-diag needs {missing} (flags or a lattice section)")
    return LatticeDiagConfig(**base)


def _dispatch(args, config: Optional[ExperimentConfig], out_dir: str) -> int:
    if args.command == 'rate':
        return len(cmd_rate(_require(config), out_dir))
    if args.command == 'fine':
        return len(cmd_fine(_require(config), out_dir))
    if args.command == 'sweep-two-user':
        sweep = _sweep_settings(args, config)
        return len(cmd_sweep_two_user(sweep.rho, sweep.r_total, sweep.steps, out_dir))
    if args.command == 'simulate':
        return cmd_simulate(_require(config), out_dir).trials
    if args.command == 'lattice-diag':
        seed = args.seed if args.seed is not None else (config.protocol.seed if config else 0)
        return len(cmd_lattice_diag(_lattice_settings(args, config), seed, out_dir))
    raise ConfigError(f"Unknown command {args.command!r}")


def _require(config: Optional[ExperimentConfig]) -> ExperimentConfig:
    if config is None:
        raise ConfigError("This command needs --config")
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Nested-lattice secret-key agreement on Gaussian Markov trees")
    sub = parser.add_subparsers(dest='command', required=True)
    for name in ('rate', 'fine', 'sweep-two-user', 'simulate', 'lattice-diag'):
        p = sub.add_parser(name)
        p.add_argument('--config', type=str, default=None, help='Path to YAML experiment config')
        p.add_argument('--out', type=str, default=None, help='Output directory (overrides output.dir)')
        p.add_argument('--seed', type=int, default=None)
        p.add_argument('--trials', type=int, default=None)
        p.add_argument('--threads', type=int, default=None)
        if name == 'sweep-two-user':
            p.add_argument('--rho', type=float, default=None)
            p.add_argument('--r-total', dest='r_total', type=float, default=None)
            p.add_argument('--steps', type=int, default=None)
        if name == 'lattice-diag':
            p.add_argument('--n', type=int, default=None)
            p.add_argument('--p', type=int, default=None)
            p.add_argument('--k-v', dest='k_v', type=int, default=None)
            p.add_argument('--k-a', dest='k_a', type=int, default=None)
            p.add_argument('--delta', type=float, default=None)
            p.add_argument('--samples', type=int, default=None)
            p.add_argument('--rho', type=float, default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO)
    args = build_parser().parse_args(argv)
    overrides = {'seed': args.seed, 'trials': args.trials, 'threads': args.threads, 'out': args.out}

    config, load_error = None, None
    out_dir = args.out or DEFAULT_OUTPUT
    if args.config:
        try:
            config = load_config(args.config, overrides)
            out_dir = config.output_dir
        except ConfigError as e:
            load_error = e

    def action() -> int:
        if load_error is not None:
            raise load_error
        return _dispatch(args, config, out_dir)

    try:
        monitored_run(args.command, config.name if config else None, out_dir, action)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except InfeasiblePlan as e:
        logger.error(f"Infeasible plan: {e}")
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
