import glob
import os
import math
import yaml
import pytest
from src.validators import schema_validator
from src.utils.errors import BadCorrelation, ConfigError, NotATree, UnknownVertex

PATH3 = {
    'vertices': [1, 2, 3],
    'edges': [{'u': 1, 'v': 2, 'rho': 0.8}, {'u': 2, 'v': 3, 'rho': 0.6}],
}


def make_config(tmpdir, name='test_run', **sections):
    config = {'name': name}
    config.update(sections)
    config_path = os.path.join(tmpdir, 'test_config.yaml')
    with open(config_path, 'w') as f:
        yaml.safe_dump(config, f)
    return config_path


def test_valid_config_loads(tmp_path):
    path = make_config(tmp_path, tree=PATH3, quantization={'n': 4, 'p': 5, 'k': 2},
                       protocol={'delta': 0.25, 'trials': 10, 'seed': 3}, output={'dir': str(tmp_path / 'out')})
    cfg = schema_validator.load_config(path)
    assert cfg.name == 'test_run'
    assert cfg.tree.names == (1, 2, 3)
    assert cfg.k == {1: 2, 2: 2, 3: 2}
    assert cfg.protocol.delta == 0.25
    assert cfg.protocol.trials == 10
    assert cfg.output_dir == str(tmp_path / 'out')
    constraints = cfg.rate_constraints()
    assert constraints[0] == pytest.approx(2 * math.log2(5) / 4)


def test_rq_bits_map(tmp_path):
    path = make_config(tmp_path, tree=PATH3, quantization={'rq_bits': {1: 1.0, 2: 2.0, 3: 1.5}})
    constraints = schema_validator.load_config(path).rate_constraints()
    assert [constraints[v] for v in range(3)] == [1.0, 2.0, 1.5]


def test_overrides_win(tmp_path):
    path = make_config(tmp_path, tree=PATH3, protocol={'seed': 1, 'trials': 5})
    cfg = schema_validator.load_config(path, {'seed': 9, 'trials': None, 'threads': 4, 'out': 'elsewhere'})
    assert cfg.protocol.seed == 9
    assert cfg.protocol.trials == 5
    assert cfg.protocol.threads == 4
    assert cfg.output_dir == 'elsewhere'


@pytest.mark.parametrize('sections', [
    {'schedule': '@hourly'},
    {'tree': {**PATH3, 'root': 1}},
    {'protocol': {'delta': 0.2, 'retries': 3}},
    {'quantization': {'n': 4, 'p': 5, 'k': 2, 'scale': 1.0}},
    {'output': {'dir': 'x', 'table': 'y'}},
])
def test_unknown_keys_rejected(tmp_path, sections):
    sections.setdefault('tree', PATH3)
    with pytest.raises(ConfigError):
        schema_validator.load_config(make_config(tmp_path, **sections))


def test_unknown_edge_key(tmp_path):
    tree = {'vertices': [1, 2], 'edges': [{'u': 1, 'v': 2, 'rho': 0.5, 'weight': 1}]}
    with pytest.raises(ConfigError):
        schema_validator.load_config(make_config(tmp_path, tree=tree))


def test_correlation_out_of_range(tmp_path):
    tree = {'vertices': [1, 2], 'edges': [{'u': 1, 'v': 2, 'rho': 1.0}]}
    with pytest.raises(BadCorrelation):
        schema_validator.load_config(make_config(tmp_path, tree=tree))


def test_cycle_rejected(tmp_path):
    tree = {'vertices': [1, 2, 3], 'edges': [
        {'u': 1, 'v': 2, 'rho': 0.5}, {'u': 2, 'v': 3, 'rho': 0.5}, {'u': 1, 'v': 3, 'rho': 0.5}]}
    with pytest.raises(NotATree):
        schema_validator.load_config(make_config(tmp_path, tree=tree))


def test_edge_to_undeclared_vertex(tmp_path):
    tree = {'vertices': [1, 2], 'edges': [{'u': 1, 'v': 5, 'rho': 0.5}]}
    with pytest.raises(UnknownVertex):
        schema_validator.load_config(make_config(tmp_path, tree=tree))


def test_k_and_rq_bits_exclusive(tmp_path):
    path = make_config(tmp_path, tree=PATH3, quantization={'n': 4, 'p': 5, 'k': 2, 'rq_bits': 1.0})
    with pytest.raises(ConfigError):
        schema_validator.load_config(path)


def test_k_must_be_positive(tmp_path):
    path = make_config(tmp_path, tree=PATH3, quantization={'n': 4, 'p': 5, 'k': {1: 2, 2: 0, 3: 2}})
    with pytest.raises(ConfigError):
        schema_validator.load_config(path)


def test_missing_vertex_rate(tmp_path):
    path = make_config(tmp_path, tree=PATH3, quantization={'rq_bits': {1: 1.0, 2: 1.0}})
    cfg = schema_validator.load_config(path)
    with pytest.raises(ConfigError):
        cfg.rate_constraints()


def test_k_needs_block_parameters(tmp_path):
    cfg = schema_validator.load_config(make_config(tmp_path, tree=PATH3, quantization={'k': 2}))
    with pytest.raises(ConfigError):
        cfg.rate_constraints()


@pytest.mark.parametrize('protocol', [{'delta': 0.5}, {'delta': 0.0}, {'trials': -1}, {'threads': 0}])
def test_protocol_ranges(tmp_path, protocol):
    with pytest.raises(ConfigError):
        schema_validator.load_config(make_config(tmp_path, tree=PATH3, protocol=protocol))


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError):
        schema_validator.load_config(str(tmp_path / 'absent.yaml'))
    bad = tmp_path / 'bad.yaml'
    bad.write_text('name: [unclosed\n')
    with pytest.raises(ConfigError):
        schema_validator.load_config(str(bad))


def test_lattice_section_needs_dimensions(tmp_path):
    with pytest.raises(ConfigError):
        schema_validator.load_config(make_config(tmp_path, lattice={'n': 4, 'p': 5}))
    cfg = schema_validator.load_config(make_config(tmp_path, lattice={'n': 4, 'p': 5, 'k_v': 2}))
    assert cfg.lattice.k_a is None
    assert cfg.tree is None


def test_bundled_configs_parse():
    paths = sorted(glob.glob(os.path.join(os.path.dirname(__file__), '..', 'configs', '*.yaml')))
    assert paths
    for path in paths:
        cfg = schema_validator.load_config(path)
        assert cfg.name
