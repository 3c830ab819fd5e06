"""带掩码的 Adam 与稀疏滑动平均（SEMA）"""
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from scripts.errors import NonFiniteError
from scripts.sparse_param import SparseParam


@dataclass
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8


def enforce_mask(param: SparseParam) -> SparseParam:
    """values ⊙ (1-mask) == 0"""
    param.values *= param.mask
    return param


def adam_step(param: SparseParam, masked_grad: np.ndarray, lr: float, beta1: float,
              beta2: float, eps: float, t: int) -> SparseParam:
    """只在激活位置上做带偏差修正的 Adam 更新

    Args:
        masked_grad: 已乘过掩码的梯度
        t: 从 1 开始的步数，用于偏差修正
    """
    if masked_grad is None:
        return param
    if not np.all(np.isfinite(masked_grad)):
        bad = int(np.size(masked_grad) - np.count_nonzero(np.isfinite(masked_grad)))
        raise NonFiniteError(f"{param.name}: 梯度中有 {bad} 个非有限值（步数 {t}）")

    active = param.mask == 1.0
    g = masked_grad[active]
    m = beta1 * param.adam_m[active] + (1.0 - beta1) * g
    v = beta2 * param.adam_v[active] + (1.0 - beta2) * g * g
    param.adam_m[active] = m
    param.adam_v[active] = v

    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param.values[active] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return enforce_mask(param)


def adam_step_all(params: Iterable[SparseParam], config: AdamConfig, t: int):
    for param in params:
        adam_step(param, param.grad, config.lr, config.beta1, config.beta2, config.eps, t)


def sema_update(param: SparseParam, beta: float) -> SparseParam:
    """稀疏 EMA

    先把激活位置的 age 加一，再按三种情况更新:
        T=0: 0（未激活）
        T=1: 当前值（新激活的权重直接从自身值开始）
        T>1: β·θ_SEMA + (1-β)·θ
    """
    active = param.mask == 1.0
    param.age[active] += 1
    param.age[~active] = 0

    current = param.values
    param.sema_values = np.where(
        param.age == 1,
        current,
        np.where(param.age > 1, beta * param.sema_values + (1.0 - beta) * current, 0.0),
    )
    return param


def ema_update(shadow: np.ndarray, values: np.ndarray, beta: float) -> np.ndarray:
    """普通 EMA，不感知稀疏性，作为对照"""
    return beta * shadow + (1.0 - beta) * values


def ema_update_param(param: SparseParam, beta: float) -> SparseParam:
    param.ema_values = ema_update(param.ema_values, param.values, beta) * param.mask
    return param


def update_averages(params: Iterable[SparseParam], mode: str, beta: float):
    """生成器每步优化之后更新影子权重，mode ∈ {sema, ema, none}"""
    for param in params:
        if mode == 'sema':
            sema_update(param, beta)
        elif mode == 'ema':
            ema_update_param(param, beta)
