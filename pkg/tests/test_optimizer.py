import math

import numpy as np
import pytest

from scripts.errors import NonFiniteError
from scripts.optimizer import AdamConfig, adam_step, adam_step_all, ema_update, enforce_mask, sema_update
from scripts.sparse_param import SparseParam


def _param(values, mask):
    return SparseParam(name='w', values=np.asarray(values, dtype=np.float64), mask=np.asarray(mask, dtype=np.float64))


def test_adam_leaves_masked_positions_alone():
    p = _param([1.0, 2.0], [1.0, 0.0])
    adam_step(p, np.array([0.5, 100.0]) * p.mask, 1e-2, 0.0, 0.999, 1e-8, 1)
    assert p.values[1] == 0.0
    assert p.adam_m[1] == 0.0 and p.adam_v[1] == 0.0
    assert p.values[0] < 1.0


def test_adam_first_step_moves_by_lr():
    p = _param([1.0, -1.0], [1.0, 1.0])
    adam_step(p, np.array([3.0, -0.01]), 1e-2, 0.0, 0.999, 1e-8, 1)
    np.testing.assert_allclose(p.values, [0.99, -0.99], rtol=1e-6)


def test_adam_rejects_non_finite_gradient():
    p = _param([1.0], [1.0])
    with pytest.raises(NonFiniteError):
        adam_step(p, np.array([np.inf]), 1e-2, 0.0, 0.999, 1e-8, 1)


def test_adam_step_all_skips_params_without_gradient():
    p = _param([1.0], [1.0])
    adam_step_all([p], AdamConfig(), 1)
    assert p.values[0] == 1.0


def test_enforce_mask():
    p = _param([0.7, 0.2], [1.0, 1.0])
    p.mask[0] = 0.0
    enforce_mask(p)
    np.testing.assert_array_equal(p.values, [0.0, 0.2])
    q = _param([0.7, 0.2], [1.0, 1.0])
    enforce_mask(q)
    np.testing.assert_array_equal(q.values, [0.7, 0.2])


def test_sema_pruned_position():
    p = _param([0.0], [0.0])
    p.sema_values[:] = 0.4
    sema_update(p, 0.99)
    assert p.sema_values[0] == 0.0
    assert p.age[0] == 0


def test_sema_newly_activated_takes_current_value():
    p = _param([0.8], [1.0])
    sema_update(p, 0.999)
    assert p.sema_values[0] == 0.8
    assert p.age[0] == 1


def test_sema_running_average():
    p = _param([2.0], [1.0])
    p.sema_values[:] = 1.0
    p.age[:] = 1
    sema_update(p, 0.9)
    assert p.sema_values[0] == pytest.approx(1.1, abs=1e-12)


def test_ema_cases():
    values = np.array([0.8, -0.3])
    np.testing.assert_array_equal(ema_update(np.zeros(2), values, 0.0), values)
    shadow = np.array([0.1, 0.2])
    np.testing.assert_array_equal(ema_update(shadow, values, 1.0), shadow)
    assert ema_update(np.zeros(1), np.array([0.8]), 0.999)[0] == pytest.approx(0.0008)


@pytest.mark.parametrize('seed', range(20))
def test_sema_matches_recursive_oracle(seed):
    rng = np.random.default_rng(seed)
    beta = float(rng.uniform(0.5, 0.999))
    size = 12
    p = _param(rng.normal(size=size), np.ones(size))
    oracle_sema = np.zeros(size)
    oracle_age = np.zeros(size, dtype=np.int64)
    ema_shadow = p.values.copy()

    for _ in range(60):
        # 随机剪掉或激活一些位置，激活的位置从新的值开始
        flips = rng.random(size) < 0.15
        new_mask = np.where(flips, 1.0 - p.mask, p.mask)
        grown = (new_mask == 1.0) & (p.mask == 0.0)
        p.mask = new_mask
        p.values = np.where(new_mask == 1.0, p.values + rng.normal(scale=0.1, size=size), 0.0)
        p.values[grown] = rng.normal(size=int(grown.sum()))

        sema_update(p, beta)
        ema_shadow = ema_update(ema_shadow, p.values, beta)
        for i in range(size):
            if new_mask[i] == 0.0:
                oracle_age[i] = 0
                oracle_sema[i] = 0.0
                continue
            oracle_age[i] += 1
            if oracle_age[i] == 1:
                oracle_sema[i] = p.values[i]
            else:
                oracle_sema[i] = beta * oracle_sema[i] + (1.0 - beta) * p.values[i]

        np.testing.assert_allclose(p.sema_values, oracle_sema, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(p.age, oracle_age)
        assert np.all(p.mask[p.age > 0] == 1.0)
        np.testing.assert_array_equal(p.sema_values[grown], p.values[grown])


def test_sema_vs_ema_on_regrown_weight():
    beta = 0.999
    p = _param([0.0, 0.5], [0.0, 1.0])
    shadow = p.values.copy()
    p.mask[0] = 1.0
    p.values[0] = 0.8
    sema_update(p, beta)
    shadow = ema_update(shadow, p.values, beta)
    assert p.sema_values[0] == 0.8
    assert shadow[0] == pytest.approx((1.0 - beta) * 0.8)


@pytest.mark.parametrize('beta1', [0.0, 0.9])
def test_adam_matches_scalar_reference(beta1):
    rng = np.random.default_rng(3)
    lr, beta2, eps, size = 2e-3, 0.999, 1e-8, 15
    mask = (rng.random(size) < 0.6).astype(np.float64)
    p = _param(rng.normal(size=size), mask)
    values = [float(x) for x in p.values]
    m, v = [0.0] * size, [0.0] * size

    for t in range(1, 26):
        grad = rng.normal(size=size) * mask
        adam_step(p, grad, lr, beta1, beta2, eps, t)
        for i in range(size):
            if mask[i] == 0.0:
                continue
            g = float(grad[i])
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            m_hat = m[i] / (1.0 - beta1 ** t)
            v_hat = v[i] / (1.0 - beta2 ** t)
            values[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
        np.testing.assert_allclose(p.values, values, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(p.values[mask == 0.0], 0.0)


def test_enforce_mask_is_idempotent():
    rng = np.random.default_rng(4)
    p = _param(rng.normal(size=20), np.ones(20))
    p.mask[rng.random(20) < 0.5] = 0.0
    once = enforce_mask(p).values.copy()
    np.testing.assert_array_equal(enforce_mask(p).values, once)
    np.testing.assert_array_equal(once[p.mask == 0.0], 0.0)


def test_sema_equals_ema_on_static_dense_mask():
    rng = np.random.default_rng(5)
    beta = 0.99
    p = _param(rng.normal(size=10), np.ones(10))
    sema_update(p, beta)
    shadow = p.sema_values.copy()
    for _ in range(50):
        p.values = p.values + rng.normal(scale=0.1, size=10)
        sema_update(p, beta)
        shadow = ema_update(shadow, p.values, beta)
        np.testing.assert_array_equal(p.sema_values, shadow)
