import pytest

from scripts.errors import DomainError
from scripts.flops import (FlopsLedger, layer_flops_forward, method_flops_ratios, network_forward_flops,
                           pf_flops_ratio, pf_total_flops, testing_flops, training_step_flops,
                           training_step_flops_split, uniform_densities)
from scripts.networks import build_ganspec
from scripts.run_config import ArchitectureConfig, TrainConfig
from scripts.topology import LayerSpec


@pytest.fixture
def spec():
    return build_ganspec(ArchitectureConfig(d_z=4, g_hidden=[16, 16], d_hidden=[16, 16]))


def _ones(layers):
    return [1.0] * len(layers)


def test_linear_layer_flops():
    layer = LayerSpec('dense', 2, 2)
    assert layer_flops_forward(layer) == 8
    assert layer_flops_forward(layer, density=0.5) == 4


def test_conv_layer_counts_output_positions():
    layer = LayerSpec('conv2d', 3, 4, 3, 3, (5, 5))
    assert layer_flops_forward(layer, batch=2) == 2 * 3 * 4 * 9 * 25 * 2


@pytest.mark.parametrize('density', [0.0, 1.5])
def test_density_domain(density):
    with pytest.raises(DomainError):
        layer_flops_forward(LayerSpec('dense', 2, 2), density=density)


def test_network_forward_matches_layer_sum(spec):
    layers = spec.generator.layers
    densities = [0.3, 0.5, 1.0]
    expected = sum(2.0 * layer.fan_in * layer.fan_out * d * 8 for layer, d in zip(layers, densities))
    assert network_forward_flops(layers, densities, batch=8) == expected


def test_step_convention(spec):
    g_fwd = network_forward_flops(spec.generator.layers, _ones(spec.generator.layers), 16)
    d_fwd = network_forward_flops(spec.discriminator.layers, _ones(spec.discriminator.layers), 16)
    split = training_step_flops_split(spec, _ones(spec.generator.layers), _ones(spec.discriminator.layers), 16)
    assert split.g == g_fwd + 3 * g_fwd
    assert split.d == 3 * 2 * d_fwd + 3 * d_fwd


def test_halving_densities_halves_step(spec):
    g, d = spec.generator.layers, spec.discriminator.layers
    full = training_step_flops(spec, _ones(g), _ones(d), 16, d_steps=2)
    half = training_step_flops(spec, [0.5] * len(g), [0.5] * len(d), 16, d_steps=2)
    assert half == full / 2


def test_testing_flops_ignore_discriminator():
    config = TrainConfig()
    low = method_flops_ratios(config, 'stu', 0.9, 0.0)
    high = method_flops_ratios(config, 'stu', 0.9, 0.9)
    assert low['test_ratio'] == high['test_ratio']
    assert low['train_ratio'] > high['train_ratio']


def test_dense_anchor():
    row = method_flops_ratios(TrainConfig(), 'dense', 0.0, 0.0)
    assert row['train_ratio'] == 1.0
    assert row['train_ratio_g'] == 1.0
    assert row['test_ratio'] == 1.0


@pytest.mark.parametrize('s_G', [0.5, 0.8, 0.95])
def test_stu_and_static_report_identical_ratios(s_G):
    config = TrainConfig()
    assert method_flops_ratios(config, 'stu', s_G, 0.5) == {
        **method_flops_ratios(config, 'static', s_G, 0.5), 'method': 'stu'}


@pytest.mark.parametrize('s_G', [0.5, 0.8, 0.9, 0.95])
def test_uniform_testing_ratio(s_G):
    config = TrainConfig(allocation='uniform')
    assert method_flops_ratios(config, 'static', s_G, 0.0)['test_ratio'] == pytest.approx(1.0 - s_G, abs=2e-3)


def test_uniform_testing_ratio_is_exact_when_counts_divide():
    config = TrainConfig(allocation='uniform', arch={'d_z': 10, 'g_hidden': [10, 10]})
    assert method_flops_ratios(config, 'static', 0.5, 0.0)['test_ratio'] == 0.5


def test_pf_without_pruning_is_twice_dense(spec):
    config = TrainConfig(steps=100, batch=16, s_G=0.0)
    assert pf_flops_ratio(config, spec) == 2.0
    assert pf_flops_ratio(config, spec, scope='generator') == 2.0


def test_pf_generator_ratio_pattern():
    config = TrainConfig(s_G=0.95, s_D=0.0)
    spec = build_ganspec(config.arch)
    assert pf_flops_ratio(config, spec, scope='generator') == pytest.approx(1.05, abs=1e-3)


def test_pf_above_dense_and_monotone():
    base = TrainConfig(s_D=0.0)
    spec = build_ganspec(base.arch)
    ratios = []
    for s_G in (0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99):
        config = base.model_copy(update={'s_G': s_G})
        ratios.append(pf_flops_ratio(config, spec))
        assert pf_total_flops(config, spec) > 0
    assert all(r > 1.0 for r in ratios)
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_pf_counts_sparse_discriminator_when_targeted():
    config = TrainConfig(s_G=0.9, s_D=0.5, prune_target='G_and_D')
    spec = build_ganspec(config.arch)
    g_only = config.model_copy(update={'prune_target': 'G'})
    assert pf_flops_ratio(config, spec) < pf_flops_ratio(g_only, spec)


def test_ticket_and_small_dense_ratios():
    config = TrainConfig(ticket_rounds=3)
    ticket = method_flops_ratios(config, 'ticket', 0.9, 0.0)
    small = method_flops_ratios(config, 'small_dense', 0.9, 0.0)
    assert ticket['train_ratio'] > 1.0
    assert small['train_ratio'] < 1.0 and small['test_ratio'] < 1.0


def test_unknown_method():
    with pytest.raises(DomainError):
        method_flops_ratios(TrainConfig(), 'magic', 0.5, 0.5)


def test_ledger_dense_anchor_is_exact(spec):
    ledger = FlopsLedger.for_run(spec, steps=37, batch=16)
    g, d = _ones(spec.generator.layers), _ones(spec.discriminator.layers)
    for _ in range(37):
        ledger.record_steps(spec, g, d, 16)
    ledger.set_test(spec, g)
    assert len(ledger.segments) == 1
    assert ledger.train_ratio == 1.0
    assert ledger.train_ratio_g == 1.0
    assert ledger.test_ratio == 1.0


def test_ledger_round_trip(spec):
    ledger = FlopsLedger.for_run(spec, steps=10, batch=4)
    ledger.record_steps(spec, uniform_densities(spec.generator.layers, 0.5), _ones(spec.discriminator.layers),
                        4, n_steps=3, phase='dense')
    ledger.record_steps(spec, _ones(spec.generator.layers), _ones(spec.discriminator.layers), 4, n_steps=2,
                        phase='finetune')
    ledger.set_test(spec, _ones(spec.generator.layers))
    restored = FlopsLedger.from_dict(ledger.to_dict())
    assert restored == ledger
    assert set(restored.phases) == {'dense', 'finetune'}
    assert testing_flops(spec, _ones(spec.generator.layers)) == restored.test_per_sample
