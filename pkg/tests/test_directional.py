"""桌面规模的方向性实验，默认跳过；用 pytest -m slow 运行"""
import numpy as np
import pytest

from scripts.gan_train import run_method
from scripts.run_config import SweepSpec, TrainConfig, load_sweep_spec
from scripts.sweep import aggregate, run_sweep
from scripts.utils import get_config_path

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


def _sweep(tmp_path, name, **overrides):
    spec = load_sweep_spec(get_config_path(f"sweeps/{name}.json"))
    spec = SweepSpec.model_validate({**spec.model_dump(mode='json'), **overrides})
    frame = run_sweep(spec, str(tmp_path / name), show_progress=False)
    assert set(frame['status']) == {'ok'}
    return aggregate(frame)


def _mean(summary, metric, **keys):
    mask = np.ones(len(summary), dtype=bool)
    for key, value in keys.items():
        mask &= (summary[key] == value).to_numpy()
    assert mask.sum() == 1, keys
    return float(summary.loc[mask, f"{metric}_mean"].iloc[0])


def test_long_run_conserves_every_layer_count():
    config = TrainConfig.model_validate({
        'method': 'stu', 's_G': 0.9, 's_D': 0.5, 'steps': 5000, 'batch': 32,
        'schedule': {'delta_t': 100}, 'arch': {'d_z': 4, 'g_hidden': [32, 32], 'd_hidden': [32, 32]},
        'eval_interval': 5000, 'eval_samples': 500,
    })
    counts = []

    def probe(event, step, G, D):
        if event == 'g_grad':
            counts.append(tuple(int(w.mask.sum()) for w in G.weights))

    result = run_method(config, probes=[probe])
    assert len(result.events) > 0
    assert len(set(counts)) == 1
    assert tuple(int(m.sum()) for m in result.final_masks()['G']) == counts[0]


def test_sparsity_unbalance(tmp_path):
    summary = _sweep(tmp_path, 'unbalance', s_D=[0.0, 0.5], seeds=SEEDS)
    assert _mean(summary, 'coverage', s_G=0.95, s_D=0.0) < _mean(summary, 'coverage', s_G=0.95, s_D=0.5)

    s_g = [0.5, 0.7, 0.8, 0.9, 0.95]
    coverage = [_mean(summary, 'coverage', s_G=value, s_D=0.5) for value in s_g]
    assert np.polyfit(s_g, coverage, 1)[0] <= 0.0
    assert coverage[0] >= coverage[-1]


def test_exploration_beats_static(tmp_path):
    summary = _sweep(tmp_path, 'stu_vs_static', methods=['stu', 'static'], seeds=SEEDS)
    for s_g in (0.9, 0.95):
        assert _mean(summary, 'coverage', method='stu', s_G=s_g) >= _mean(summary, 'coverage', method='static', s_G=s_g)
        assert _mean(summary, 'w1', method='stu', s_G=s_g) <= _mean(summary, 'w1', method='static', s_G=s_g)


def test_longer_training_extends_exploration(tmp_path):
    summary = _sweep(tmp_path, 'itop_extension', seeds=SEEDS)
    assert _mean(summary, 'itop_rate', steps_mult=5) >= _mean(summary, 'itop_rate', steps_mult=1)
    assert _mean(summary, 'w1', steps_mult=5) <= _mean(summary, 'w1', steps_mult=1)


def test_exploring_discriminator_only_does_not_win(tmp_path):
    summary = _sweep(tmp_path, 'explore_target', explore_targets=['G', 'D'], seeds=SEEDS)
    assert _mean(summary, 'w1', explore_target='D') >= _mean(summary, 'w1', explore_target='G')
