import os

import pytest

from config import DatasetConfig, load_config, parse_override
from errors import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')


def _config(name):
    return os.path.join(CONFIG_DIR, name)


def test_defaults():
    config = load_config()
    assert config.synthetic is None
    assert config.stage1.variant == 'ordinal'
    assert config.stage1.lr is None
    assert config.stage2.layers == 8 and config.stage2.kernel_size == 3
    assert config.eval.ribbons


def test_synthetic_config():
    config = load_config(_config('synthetic.toml'))
    assert config.seed == 42
    assert config.synthetic.P == 7 and config.synthetic.seed == 42
    assert config.stage1.seed == 42 and config.stage2.seed == 42
    assert config.stage1.backbone == 'toy'
    assert config.dataset.split == (10, 4, 6)
    assert config.probe.split == (8, 4, 0)


def test_overrides_win_over_file():
    config = load_config(_config('synthetic.toml'),
                         ['stage1.epochs=2', 'stage1.variant=independent', 'stage2.lr=1e-4',
                          'dataset.split=[5, 2, 3]'])
    assert config.stage1.epochs == 2
    assert config.stage1.variant == 'independent'
    assert config.stage2.lr == 1e-4
    assert config.dataset.split == (5, 2, 3)


def test_top_level_seed_override_reaches_sections():
    config = load_config(_config('synthetic.toml'), ['seed=7'])
    assert config.synthetic.seed == 7
    assert config.stage1.seed == 7


def test_explicit_seed_replaces_section_seeds():
    config = load_config(_config('synthetic.toml'), ['stage1.seed=3'], seed=11)
    assert config.seed == 11
    assert config.stage1.seed == 11 and config.stage2.seed == 11 and config.synthetic.seed == 11


def test_section_seed_kept_without_explicit_seed():
    config = load_config(_config('synthetic.toml'), ['stage1.seed=3'])
    assert config.stage1.seed == 3 and config.stage2.seed == 42


def test_parse_override():
    assert parse_override('stage1.lr=1e-4') == ('stage1', 'lr', 1e-4)
    assert parse_override('stage1.backbone=toy') == ('stage1', 'backbone', 'toy')
    assert parse_override('seed=3') == (None, 'seed', 3)
    for bad in ('stage1.lr', 'a.b.c=1', '.x=1'):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match='colour'):
        load_config(overrides=['stage1.colour=red'])
    with pytest.raises(ConfigError, match='stage3'):
        load_config(overrides=['stage3.lr=1'])


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        load_config(overrides=['stage1.epochs="many"'])
    with pytest.raises(ConfigError):
        load_config(overrides=['dataset.format=mp4'])
    with pytest.raises(ConfigError):
        load_config(overrides=['stage2.dropout=1.5'])


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_config(str(tmp_path / 'absent.toml'))
    broken = tmp_path / 'broken.toml'
    broken.write_text('[stage1\nlr = ')
    with pytest.raises(ConfigError, match='cannot parse'):
        load_config(str(broken))


def test_dataset_configs_load():
    cholec = load_config(_config('cholec80.toml'))
    assert cholec.dataset.split == (32, 8, 40)
    assert cholec.stage1.backbone == 'clip-resnet50'
    autolaparo = load_config(_config('autolaparo.json'))
    assert autolaparo.stage1.variant == 'independent'
    assert autolaparo.dataset.format == 'autolaparo-style'


def test_validate_paths_reports_missing_dataset(tmp_path):
    config = load_config(_config('cholec80.toml'),
                         [f'dataset.root="{tmp_path / "absent"}"'])
    with pytest.raises(ConfigError, match='dataset.root'):
        config.validate_paths()


def test_output_root_environment_override(monkeypatch, tmp_path):
    monkeypatch.delenv('PHASE_LAB_OUTPUT_ROOT', raising=False)
    config = load_config(_config('synthetic.toml'))
    assert config.out_root == 'runs/synthetic'
    monkeypatch.setenv('PHASE_LAB_OUTPUT_ROOT', str(tmp_path))
    assert config.out_root == str(tmp_path)


def test_default_split_counts():
    assert DatasetConfig(format='cholec80-style').split_counts(80) == (32, 8, 40)
    assert DatasetConfig(split=(2, 1, 1)).split_counts(10) == (2, 1, 1)
    assert sum(DatasetConfig().split_counts(20)) == 20


def test_config_json_is_complete():
    data = load_config(_config('synthetic.toml')).to_json()
    assert set(data) >= {'seed', 'dataset', 'synthetic', 'stage1', 'stage2', 'eval', 'probe'}
    assert data['dataset']['split'] == [10, 4, 6]
