import json

import pytest
from pydantic import ValidationError

from scripts.errors import ConfigError
from scripts.run_config import (SweepSpec, TrainConfig, apply_overrides, build_train_config, canonical_json,
                                config_hash, load_sweep_spec, load_train_config, parse_override,
                                validate_train_config)
from scripts.utils import get_config_path


def test_defaults():
    config = TrainConfig()
    assert config.method == 'stu'
    assert config.schedule.delta_t == 100
    assert config.schedule.p0 == 0.5
    assert config.t_end == 1500
    assert config.total_finetune_steps == config.steps
    assert config.ema_beta == 0.999


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match='bogus'):
        validate_train_config({'bogus': 1})
    with pytest.raises(ConfigError, match='schedule.dt'):
        validate_train_config({'schedule': {'dt': 5}})


@pytest.mark.parametrize('data', [{'s_G': 1.0}, {'s_D': -0.1}, {'method': 'magic'}, {'steps': 0},
                                  {'steps': 100, 'schedule': {'t_end': 200}}])
def test_invalid_values(data):
    with pytest.raises(ValidationError):
        TrainConfig.model_validate(data)


def test_canonical_json_and_hash():
    a = TrainConfig(s_G=0.9)
    b = TrainConfig.model_validate(json.loads(canonical_json(a)))
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 16
    assert config_hash(a) != config_hash(TrainConfig(s_G=0.8))
    assert ' ' not in canonical_json(a)


def test_parse_override_types():
    assert parse_override('s_G=0.9') == ('s_G', 0.9)
    assert parse_override('snapshot_masks=false') == ('snapshot_masks', False)
    assert parse_override('arch.g_hidden=[8, 8]') == ('arch.g_hidden', [8, 8])
    with pytest.raises(ConfigError):
        parse_override('s_G')


def test_apply_overrides_dotted_paths():
    data = apply_overrides({'method': 'static'}, ['schedule.delta_t=50', 's_G=0.7'])
    config = validate_train_config(data)
    assert config.schedule.delta_t == 50
    assert config.s_G == 0.7
    assert config.method == 'static'


def test_apply_overrides_unknown_path():
    with pytest.raises(ConfigError, match='schedule.bogus'):
        apply_overrides({}, ['schedule.bogus=1'])
    with pytest.raises(ConfigError, match='s_G.x'):
        apply_overrides({}, ['s_G.x=1'])


def test_seed_precedence(monkeypatch):
    assert build_train_config({'seed': 1}).seed == 1
    monkeypatch.setenv('SPARSE_EVOLVE_SEED', '5')
    assert build_train_config({'seed': 1}, ['seed=3']).seed == 5
    assert build_train_config({'seed': 1}, seed=9).seed == 9


def test_bad_seed_env(monkeypatch):
    monkeypatch.setenv('SPARSE_EVOLVE_SEED', 'abc')
    with pytest.raises(ConfigError):
        build_train_config({})


def test_load_train_config_errors(tmp_path):
    broken = tmp_path / 'broken.json'
    broken.write_text('{"s_G": ', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_train_config(str(broken))
    with pytest.raises(FileNotFoundError):
        load_train_config(str(tmp_path / 'missing.json'))


def test_sweep_expansion():
    spec = SweepSpec(name='grid', base=TrainConfig(steps=10), s_G=[0.5, 0.8, 0.9], s_D=[0.0, 0.5, 0.9],
                     seeds=[0, 1])
    cells = spec.expand()
    assert len(cells) == 18
    assert len({config_hash(item['config']) for item in cells}) == 18


def test_sweep_steps_multiplier():
    spec = SweepSpec(base=TrainConfig(steps=10, schedule={'t_end': 8}), steps_mults=[1, 5])
    configs = [item['config'] for item in spec.expand()]
    assert [c.steps for c in configs] == [10, 50]
    assert [c.t_end for c in configs] == [8, 40]


def test_sweep_rejects_empty_axis():
    with pytest.raises(ValidationError):
        SweepSpec(s_G=[])


def test_bundled_presets_and_sweeps_validate():
    for name in ('ring8_stu', 'ring8_static', 'grid25_conv_stu'):
        load_train_config(get_config_path(f"presets/{name}.json"))
    for name in ('unbalance', 'stu_vs_static', 'explore_target', 'itop_extension', 'delta_t'):
        assert load_sweep_spec(get_config_path(f"sweeps/{name}.json")).expand()
