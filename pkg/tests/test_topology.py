import itertools

import numpy as np
import pytest

from scripts.errors import DomainError
from scripts.sparse_param import SparseParam
from scripts.topology import (LayerSpec, allocate_erk, allocate_uniform, apply_masks, budget, init_masks,
                              magnitude_prune_global, magnitude_prune_uniform, raw_density, round_half_up,
                              sparsity_of, ticket_sparsity)


def _dense(n_in, n_out):
    return LayerSpec('dense', n_in, n_out)


def _param(values, name='w'):
    return SparseParam.dense(name, np.asarray(values, dtype=np.float64))


def test_uniform_keeps_same_fraction():
    plan = allocate_uniform([_dense(10, 10), _dense(10, 20)], 0.9)
    assert plan.kept == [10, 20]


def test_uniform_dense_at_zero():
    plan = allocate_uniform([_dense(3, 7), _dense(7, 2)], 0.0)
    assert plan.densities == [1.0, 1.0]


def test_uniform_keeps_at_least_one():
    assert allocate_uniform([_dense(1, 3)], 0.9).kept == [1]


@pytest.mark.parametrize('s', [1.0, 1.5, -0.1])
def test_sparsity_out_of_range(s):
    with pytest.raises(DomainError):
        allocate_uniform([_dense(4, 4)], s)
    with pytest.raises(DomainError):
        allocate_erk([_dense(4, 4)], s)


def test_layer_spec_rejects_zero_counts():
    with pytest.raises(DomainError):
        LayerSpec('dense', 0, 4)
    with pytest.raises(DomainError):
        LayerSpec('pool', 4, 4)


@pytest.mark.parametrize('s', [0.1, 0.5, 0.9, 0.99])
def test_erk_single_conv_layer_is_uniform(s):
    layer = LayerSpec('conv2d', 16, 16, 3, 3)
    plan = allocate_erk([layer], s)
    assert plan.kept == [budget([layer], s)]
    assert plan.densities[0] == pytest.approx(1.0 - s, abs=1.0 / layer.n_params)


def test_erk_caps_small_layer():
    # 原始密度 0.2 与 0.02；第一层被截断为稠密，剩余预算全部给第二层
    plan = allocate_erk([_dense(10, 10), _dense(100, 100)], 0.5)
    assert plan.kept == [100, 4950]
    assert plan.total_kept == 5050


def test_erk_dense_at_zero():
    plan = allocate_erk([_dense(3, 50), LayerSpec('conv2d', 4, 8, 5, 5)], 0.0)
    assert plan.densities == [1.0, 1.0]


def test_erk_uses_kernel_terms_only_for_conv():
    dense = _dense(8, 4)
    conv = LayerSpec('conv2d', 8, 4, 3, 3)
    assert raw_density(dense, 'erk') == raw_density(dense, 'er')
    assert raw_density(conv, 'erk') == pytest.approx((8 + 4 + 3 + 3) / (8 * 4 * 9))
    assert raw_density(conv, 'er') == pytest.approx((8 + 4) / (8 * 4))


def test_erk_larger_kernel_gets_lower_density():
    plan = allocate_erk([LayerSpec('conv2d', 8, 8, 1, 1), LayerSpec('conv2d', 8, 8, 5, 5)], 0.9)
    assert plan.densities[1] < plan.densities[0]


def _oracle_erk(layers, s):
    """枚举所有可能的截断集合，找出自洽的那一个"""
    target = budget(layers, s)
    raw = [raw_density(layer, 'erk') for layer in layers]
    sizes = [layer.n_params for layer in layers]
    for n_capped in range(len(layers) + 1):
        for capped in itertools.combinations(range(len(layers)), n_capped):
            remaining = target - sum(sizes[i] for i in capped)
            divisor = sum(raw[i] * sizes[i] for i in range(len(layers)) if i not in capped)
            if divisor == 0:
                continue
            eps = remaining / divisor
            if all(eps * raw[i] > 1.0 for i in capped) and all(
                    eps * raw[i] <= 1.0 for i in range(len(layers)) if i not in capped):
                return [sizes[i] if i in capped else min(sizes[i], max(1, round_half_up(eps * raw[i] * sizes[i])))
                        for i in range(len(layers))]
    raise AssertionError('no consistent cap set')


def _random_stack(rng):
    layers = []
    for _ in range(int(rng.integers(2, 6))):
        if rng.random() < 0.5:
            layers.append(_dense(int(rng.integers(1, 64)), int(rng.integers(1, 64))))
        else:
            k = int(rng.integers(1, 6))
            layers.append(LayerSpec('conv2d', int(rng.integers(1, 16)), int(rng.integers(1, 16)), k, k))
    return layers


@pytest.mark.parametrize('seed', range(50))
def test_erk_budget_and_oracle(seed):
    rng = np.random.default_rng(seed)
    layers = _random_stack(rng)
    s = float(rng.uniform(0.5, 0.99))
    plan = allocate_erk(layers, s)

    assert all(0.0 < d <= 1.0 for d in plan.densities)
    assert abs(plan.total_kept - budget(layers, s)) <= len(layers)
    assert plan.kept == _oracle_erk(layers, s)


def test_init_masks_exact_counts_and_determinism():
    layers = [_dense(2, 5), _dense(5, 4)]
    plan = allocate_uniform(layers, 0.5)
    masks_a = init_masks(plan, layers, np.random.default_rng(3))
    masks_b = init_masks(plan, layers, np.random.default_rng(3))
    assert [int(m.sum()) for m in masks_a] == [5, 10]
    for a, b in zip(masks_a, masks_b):
        np.testing.assert_array_equal(a, b)


def test_init_masks_full_density():
    layers = [_dense(3, 3)]
    masks = init_masks(allocate_uniform(layers, 0.0), layers, np.random.default_rng(0))
    np.testing.assert_array_equal(masks[0], np.ones((3, 3)))


def test_prune_uniform_keeps_largest():
    masks = magnitude_prune_uniform([_param([0.1, -0.5, 0.3, 0.05])], 0.5)
    np.testing.assert_array_equal(masks[0], [0, 1, 1, 0])


def test_prune_uniform_tie_keeps_lowest_index():
    masks = magnitude_prune_uniform([_param([0.7, -0.7, 0.7, 0.7])], 0.5)
    np.testing.assert_array_equal(masks[0], [1, 1, 0, 0])


def test_prune_uniform_zero_sparsity():
    masks = magnitude_prune_uniform([_param([0.1, 0.2, 0.3])], 0.0)
    np.testing.assert_array_equal(masks[0], [1, 1, 1])


def test_prune_global_examples():
    masks = magnitude_prune_global([_param([1.0, 2.0], 'a'), _param([0.5, 3.0], 'b')], 0.5)
    np.testing.assert_array_equal(masks[0], [0, 1])
    np.testing.assert_array_equal(masks[1], [0, 1])

    masks = magnitude_prune_global([_param([1.0, 2.0], 'a'), _param([3.0, 4.0], 'b')], 0.5)
    np.testing.assert_array_equal(masks[0], [0, 0])
    np.testing.assert_array_equal(masks[1], [1, 1])

    masks = magnitude_prune_global([_param([1.0, 2.0], 'a'), _param([3.0, 4.0], 'b')], 0.0)
    assert all(m.all() for m in masks)


def test_pruning_is_nested():
    values = np.random.default_rng(0).normal(size=200)
    previous = None
    for s in (0.2, 0.5, 0.8, 0.95):
        mask = magnitude_prune_uniform([_param(values)], s)[0]
        if previous is not None:
            assert np.all(previous >= mask)
        previous = mask


def test_apply_masks_resets_removed_positions():
    p = _param([1.0, -2.0, 3.0])
    p.adam_m[:] = 1.0
    p.age[:] = 5
    apply_masks([p], [np.array([1.0, 0.0, 1.0])])
    np.testing.assert_array_equal(p.values, [1.0, 0.0, 3.0])
    np.testing.assert_array_equal(p.adam_m, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(p.age, [5, 0, 5])


def test_sparsity_ignores_biases():
    weight = SparseParam(name='w', values=np.ones(4), mask=np.array([1.0, 0.0, 0.0, 0.0]))
    bias = SparseParam.dense('b', np.ones(100), prunable=False)
    assert sparsity_of([weight, bias]) == 0.75


def test_ticket_sparsity_schedule():
    assert ticket_sparsity(0.9, 0, 3) == 0.0
    assert ticket_sparsity(0.9, 3, 3) == pytest.approx(0.9)
    assert ticket_sparsity(0.9, 1, 3) < ticket_sparsity(0.9, 2, 3)
