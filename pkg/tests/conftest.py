import json

import numpy as np
import pytest

from scripts.networks import Network, build_ganspec
from scripts.run_config import ArchitectureConfig, TrainConfig

# 足够小的网络，单次运行在一秒内完成
TINY = {
    'method': 'stu',
    's_G': 0.8,
    's_D': 0.5,
    'steps': 40,
    'batch': 16,
    'schedule': {'delta_t': 10, 'p0': 0.5, 'decay': 'cosine'},
    'arch': {'kind': 'mlp', 'd_z': 4, 'g_hidden': [16, 16], 'd_hidden': [16, 16]},
    'dataset': {'kind': 'ring8'},
    'eval_interval': 20,
    'eval_samples': 200,
    'n_projections': 8,
    'seed': 0,
}


def tiny_data(**updates) -> dict:
    data = json.loads(json.dumps(TINY))
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    return data


def tiny_config(**updates) -> TrainConfig:
    return TrainConfig.model_validate(tiny_data(**updates))


@pytest.fixture(autouse=True)
def isolated_output(tmp_path, monkeypatch):
    """每个测试使用独立的输出目录，且不受外部种子环境变量影响"""
    output = tmp_path / 'output'
    monkeypatch.setenv('SPARSE_EVOLVE_OUTPUT', str(output))
    monkeypatch.delenv('SPARSE_EVOLVE_SEED', raising=False)
    return output


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def make_data():
    return tiny_data


@pytest.fixture
def config_file(tmp_path):
    def _write(name='run.json', **updates):
        path = tmp_path / name
        path.write_text(json.dumps(tiny_data(**updates)), encoding='utf-8')
        return str(path)
    return _write


@pytest.fixture
def toy_gan():
    """≤100 个参数的随机稀疏 G/D，用于梯度检查"""
    def _build(seed: int, density: float = 0.7):
        rng = np.random.default_rng(seed)
        arch = ArchitectureConfig(d_z=2, g_hidden=[4], d_hidden=[4], g_activation='tanh')
        spec = build_ganspec(arch)

        def _masks(layers):
            masks = []
            for layer in layers:
                mask = (rng.random(layer.weight_shape) < density).astype(np.float64)
                mask.reshape(-1)[0] = 1.0
                masks.append(mask)
            return masks

        G = Network(spec.generator, _masks(spec.generator.layers), rng)
        D = Network(spec.discriminator, _masks(spec.discriminator.layers), rng)
        return G, D, rng
    return _build
