import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Hashable, Mapping, Optional

import pandas as pd
import yaml
try:
    import pandera.pandas as pa  # new namespaced import
    try:
        from pandera.errors import SchemaErrors
    except Exception:  # fallback if errors module path changes
        SchemaErrors = pa.errors.SchemaErrors  # type: ignore[attr-defined]
except Exception:  # fallback for older pandera versions
    import pandera as pa
    try:
        from pandera.errors import SchemaErrors
    except Exception:  # very old versions
        SchemaErrors = pa.errors.SchemaErrors  # type: ignore[attr-defined]

from src.protocol.block_plan import DEFAULT_N_OUT_CAP, constraints_from_k
from src.protocol.key_agreement import DEFAULT_EXTRACTOR_MARGIN
from src.rates.rate_engine import RateConstraints
from src.sources.tree_source import CorrelatedTree, build_tree
from src.utils.errors import BadCorrelation, ConfigError

logger = logging.getLogger(__name__)

TOP_KEYS = {'name', 'description', 'tree', 'quantization', 'rates', 'protocol', 'lattice', 'sweep', 'output'}
TREE_KEYS = {'vertices', 'edges'}
EDGE_KEYS = {'u', 'v', 'rho'}
QUANT_KEYS = {'n', 'p', 'k', 'rq_bits'}
RATES_KEYS = {'units', 'variant'}
OUTPUT_KEYS = {'dir'}

EDGE_SCHEMA = pa.DataFrameSchema({
    'u': pa.Column(nullable=False),
    'v': pa.Column(nullable=False),
    'rho': pa.Column(float, pa.Check.in_range(-1.0, 1.0, include_min=False, include_max=False), coerce=True),
}, strict=True)

K_SCHEMA = pa.DataFrameSchema({
    'vertex': pa.Column(nullable=False, unique=True),
    'k': pa.Column(int, pa.Check.ge(1), coerce=True),
}, strict=True)

RQ_SCHEMA = pa.DataFrameSchema({
    'vertex': pa.Column(nullable=False, unique=True),
    'rq_bits': pa.Column(float, pa.Check.gt(0), coerce=True),
}, strict=True)

# output tables
RATE_TABLE_SCHEMA = pa.DataFrameSchema({
    'root': pa.Column(nullable=False),
    'members': pa.Column(str),
    'r_ent': pa.Column(float),
    'r_com': pa.Column(float),
    'candidate': pa.Column(float),
    'chosen': pa.Column(bool),
}, strict=True, ordered=True)

FINE_TABLE_SCHEMA = pa.DataFrameSchema({
    'r_key_fine': pa.Column(float, pa.Check.ge(0)),
    'c_key': pa.Column(float, pa.Check.ge(0)),
    'gap': pa.Column(float),
    'classification': pa.Column(str, pa.Check.isin(['AchievesCapacity', 'StrictlySuboptimal'])),
    'witness_root': pa.Column(nullable=False),
    'witness_members': pa.Column(str),
}, strict=True, ordered=True)

SWEEP_SCHEMA = pa.DataFrameSchema({
    'r_u': pa.Column(float, pa.Check.ge(0)),
    'r_v': pa.Column(float, pa.Check.ge(0)),
    'rate_uv': pa.Column(float),
    'rate_vu': pa.Column(float),
    'rate_max': pa.Column(float),
    'rnn_u': pa.Column(float),
    'rnn_v': pa.Column(float),
}, strict=True, ordered=True)

TRIAL_SCHEMA = pa.DataFrameSchema({
    'trial': pa.Column(int, pa.Check.ge(0), unique=True),
    'agreement': pa.Column(bool),
    'oracle_match': pa.Column(bool),
    'transcript_key_match': pa.Column(bool),
    'analog_block_errors': pa.Column(int, pa.Check.ge(0)),
    'identity_violations': pa.Column(int, pa.Check.ge(0)),
    'propagated_errors': pa.Column(int, pa.Check.ge(0)),
    'symbol_errors': pa.Column(int, pa.Check.ge(0)),
    'rs_failures': pa.Column(int, pa.Check.ge(0)),
    'failed_terminals': pa.Column(int, pa.Check.ge(0)),
    'key_symbols': pa.Column(int, pa.Check.ge(0)),
    'key_bits': pa.Column(float, pa.Check.ge(0)),
    'key': pa.Column(str, nullable=True),
    'nearest_point_queries': pa.Column(int, pa.Check.ge(0)),
    'coset_evaluations': pa.Column(int, pa.Check.ge(0)),
    'field_ops': pa.Column(int, pa.Check.ge(0)),
    r'^bits_.+$': pa.Column(float, pa.Check.ge(0), regex=True),
}, strict=False)

CHAIN_SCHEMA = pa.DataFrameSchema({
    'n': pa.Column(int, pa.Check.ge(1)),
    'p': pa.Column(int, pa.Check.ge(2)),
    'k_v': pa.Column(int, pa.Check.ge(1)),
    'k_a': pa.Column(int, pa.Check.ge(0)),
    'coarse_dim': pa.Column(int, pa.Check.ge(0)),
    'gamma': pa.Column(float, pa.Check.gt(0)),
    'sigma2': pa.Column(float, pa.Check.gt(0)),
    'sigma2_stderr': pa.Column(float, pa.Check.ge(0)),
    'nesting_ratio': pa.Column(int, pa.Check.ge(2)),
    'vol_ratio_coarse_fine': pa.Column(float, pa.Check.gt(0)),
    'vol_ratio_middle_fine': pa.Column(float, pa.Check.gt(0)),
    'rate_bits': pa.Column(float, pa.Check.gt(0)),
    'coarse_margin': pa.Column(float, pa.Check.gt(0)),
    'middle_margin': pa.Column(float, pa.Check.gt(0)),
    'covering_ratio': pa.Column(float, pa.Check.gt(0)),
    'normalized_moment': pa.Column(float, pa.Check.gt(0)),
    'attempts': pa.Column(int, pa.Check.ge(1)),
}, strict=False)

RUN_MONITOR_SCHEMA = pa.DataFrameSchema({
    'run_id': pa.Column(str),
    'command': pa.Column(str),
    'config_name': pa.Column(str, nullable=True),
    'start_time': pa.Column(str),
    'end_time': pa.Column(str),
    'duration_sec': pa.Column(float, pa.Check.ge(0)),
    'rows_written': pa.Column(int, pa.Check.ge(0)),
    'status': pa.Column(str, pa.Check.isin(['success', 'failed'])),
    'error_message': pa.Column(str, nullable=True),
}, strict=True, ordered=True)


@dataclass(frozen=True)
class ProtocolConfig:
    delta: float = 0.2
    trials: int = 100
    seed: int = 0
    n_out_cap: int = DEFAULT_N_OUT_CAP
    extractor_margin: float = DEFAULT_EXTRACTOR_MARGIN
    k_a: Optional[int] = None
    coarse_dim: int = 0
    sigma2_samples: int = 100_000
    max_retries: int = 8
    threads: int = 1


@dataclass(frozen=True)
class LatticeDiagConfig:
    n: int
    p: int
    k_v: int
    k_a: Optional[int] = None
    delta: float = 0.2
    samples: int = 100_000
    rho: float = 0.9


@dataclass(frozen=True)
class SweepConfig:
    rho: float
    r_total: float
    steps: int = 21


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    description: str = ''
    tree: Optional[CorrelatedTree] = None
    n: Optional[int] = None
    p: Optional[int] = None
    k: Optional[Dict[Hashable, int]] = None
    rq_bits: Optional[Dict[Hashable, float]] = None
    units: str = 'bits'
    variant: str = 'published'
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    lattice: Optional[LatticeDiagConfig] = None
    sweep: Optional[SweepConfig] = None
    output_dir: str = 'output'

    def require_tree(self) -> CorrelatedTree:
        if self.tree is None:
            raise ConfigError(f"Config {self.name!r} has no tree section")
        return self.tree

    def rate_constraints(self) -> RateConstraints:
        tree = self.require_tree()
        if self.k is not None:
            if self.n is None or self.p is None:
                raise ConfigError("quantization.k needs quantization.n and quantization.p")
            try:
                return constraints_from_k(tree, self.n, self.p, self.k)
            except ValueError as e:
                raise ConfigError(str(e))
        if self.rq_bits is not None:
            try:
                return RateConstraints.from_names(tree, self.rq_bits)
            except ValueError as e:
                raise ConfigError(str(e))
        raise ConfigError(f"Config {self.name!r} gives neither quantization.k nor quantization.rq_bits")


def _reject_unknown(section: str, mapping: Any, allowed) -> Dict[str, Any]:
    if mapping is None:
        return {}
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"Section {section!r} must be a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown keys in {section!r}: {unknown}")
    return dict(mapping)


def _validate(schema, df: pd.DataFrame, section: str) -> pd.DataFrame:
    try:
        return schema.validate(df, lazy=True)
    except SchemaErrors as e:
        failures = e.failure_cases
        logger.error(f"Schema validation failed for {section}: {failures.to_dict('records')}")
        checks = failures['check'].astype(str) if 'check' in failures else pd.Series(dtype=str)
        if section == 'tree.edges' and checks.str.contains('in_range').any():
            raise BadCorrelation(f"Edge correlations must lie in (-1, 1): {failures.to_dict('records')}")
        raise ConfigError(f"Invalid {section}: {failures.to_dict('records')}")


def parse_tree(section: Mapping[str, Any]) -> CorrelatedTree:
    section = _reject_unknown('tree', section, TREE_KEYS)
    if 'vertices' not in section or 'edges' not in section:
        raise ConfigError("tree needs 'vertices' and 'edges'")
    edges = section['edges'] or []
    for i, edge in enumerate(edges):
        _reject_unknown(f'tree.edges[{i}]', edge, EDGE_KEYS)
    df = pd.DataFrame(list(edges), columns=['u', 'v', 'rho'])
    df = _validate(EDGE_SCHEMA, df, 'tree.edges')
    return build_tree(section['vertices'], df[['u', 'v', 'rho']].itertuples(index=False, name=None))


def _vertex_table(value, column: str, schema, names) -> Dict[Hashable, Any]:
    if isinstance(value, Mapping):
        table = pd.DataFrame({'vertex': list(value.keys()), column: list(value.values())})
    else:
        table = pd.DataFrame({'vertex': list(names), column: [value] * len(names)})
    table = _validate(schema, table, f'quantization.{column}')
    return dict(zip(table['vertex'], table[column].tolist()))


def _build_section(cls, section: str, raw: Any, required=()):
    allowed = {f.name for f in fields(cls)}
    values = _reject_unknown(section, raw, allowed)
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"Section {section!r} is missing {missing}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Bad {section!r} section: {e}")


def parse_config(config: Mapping[str, Any]) -> ExperimentConfig:
    config = _reject_unknown('<root>', config, TOP_KEYS)
    if 'name' not in config:
        raise ConfigError("Config needs a 'name'")
    tree = parse_tree(config['tree']) if config.get('tree') is not None else None

    quant = _reject_unknown('quantization', config.get('quantization'), QUANT_KEYS)
    if 'k' in quant and 'rq_bits' in quant:
        raise ConfigError("Give either quantization.k or quantization.rq_bits, not both")
    names = tree.names if tree is not None else ()
    k = _vertex_table(quant['k'], 'k', K_SCHEMA, names) if 'k' in quant else None
    rq = _vertex_table(quant['rq_bits'], 'rq_bits', RQ_SCHEMA, names) if 'rq_bits' in quant else None

    rates = _reject_unknown('rates', config.get('rates'), RATES_KEYS)
    protocol = _build_section(ProtocolConfig, 'protocol', config.get('protocol'))
    if not 0 < protocol.delta < 0.5:
        raise ConfigError(f"protocol.delta must lie in (0, 1/2), got {protocol.delta}")
    if protocol.trials < 0 or protocol.threads < 1:
        raise ConfigError("protocol.trials must be >= 0 and protocol.threads >= 1")
    lattice = (_build_section(LatticeDiagConfig, 'lattice', config['lattice'], required=('n', 'p', 'k_v'))
               if config.get('lattice') is not None else None)
    sweep = (_build_section(SweepConfig, 'sweep', config['sweep'], required=('rho', 'r_total'))
             if config.get('sweep') is not None else None)
    output = _reject_unknown('output', config.get('output'), OUTPUT_KEYS)

    return ExperimentConfig(
        name=str(config['name']),
        description=str(config.get('description') or ''),
        tree=tree,
        n=quant.get('n'),
        p=quant.get('p'),
        k=k,
        rq_bits=rq,
        units=rates.get('units', 'bits'),
        variant=rates.get('variant', 'published'),
        protocol=protocol,
        lattice=lattice,
        sweep=sweep,
        output_dir=str(output.get('dir', 'output')),
    )


def load_config(config_path: str, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a YAML experiment file; `overrides` (seed, trials, threads, out) win over the file."""
    try:
        with open(config_path, 'r') as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {config_path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Config {config_path} is not valid YAML: {e}")
    config = parse_config(raw or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if overrides:
        out = overrides.pop('out', None)
        protocol = replace(config.protocol, **overrides)
        config = replace(config, protocol=protocol, output_dir=out or config.output_dir)
    logger.info(f"Loaded config {config.name!r} from {config_path}")
    return config


def validate_frame(df: pd.DataFrame, schema, table: str) -> pd.DataFrame:
    """Check an output table before it is written."""
    try:
        return schema.validate(df, lazy=True)
    except SchemaErrors as e:
        raise ValueError(f"Output table {table} violates its schema: {e.failure_cases.to_dict('records')}")


if __name__ == "__main__":
    import argparse
    parser = argparse.ArgumentParser()
    parser.add_argument("config_path", type=str, help="Path to YAML config file")
    args = parser.parse_args()
    cfg = load_config(args.config_path)
    print(cfg)
