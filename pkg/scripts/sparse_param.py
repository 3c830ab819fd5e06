from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from scripts.errors import DimensionError


@dataclass
class SparseParam:
    """带掩码的参数张量

    values 与 mask 同形状；mask 为 0 的位置 values、Adam 动量、SEMA 值和 age 都保持为 0。
    grad 是乘过掩码的梯度（优化器使用），dense_grad 是未乘掩码的梯度（梯度再生长使用）。
    prunable=False 的参数（偏置）始终稠密，不计入稀疏度。
    """
    name: str
    values: np.ndarray
    mask: np.ndarray
    prunable: bool = True
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    sema_values: np.ndarray = None
    ema_values: np.ndarray = None
    age: np.ndarray = None
    grad: Optional[np.ndarray] = None
    dense_grad: Optional[np.ndarray] = None
    init_values: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.shape != self.mask.shape:
            raise DimensionError(
                f"{self.name}: 掩码形状 {self.mask.shape} 与权重形状 {self.values.shape} 不一致")
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.values)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.values)
        if self.sema_values is None:
            self.sema_values = np.zeros_like(self.values)
        if self.ema_values is None:
            self.ema_values = self.values * self.mask
        if self.age is None:
            self.age = np.zeros(self.values.shape, dtype=np.int64)
        if self.init_values is None:
            self.init_values = self.values.copy()
        self.values *= self.mask

    @classmethod
    def dense(cls, name: str, values: np.ndarray, prunable: bool = True) -> 'SparseParam':
        values = np.asarray(values, dtype=np.float64)
        return cls(name=name, values=values, mask=np.ones_like(values), prunable=prunable)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    @property
    def density(self) -> float:
        return self.n_active / self.size

    def effective(self, source: str = 'values') -> np.ndarray:
        """前向计算使用的权重：source ∈ {values, sema, ema}，均乘以掩码"""
        if source == 'sema':
            return self.sema_values * self.mask
        if source == 'ema':
            return self.ema_values * self.mask
        return self.values * self.mask

    def zero_grad(self):
        self.grad = None
        self.dense_grad = None

    def accumulate_grad(self, dense_grad: np.ndarray):
        """累加未掩码梯度，并同步更新掩码梯度"""
        if dense_grad.shape != self.values.shape:
            raise DimensionError(f"{self.name}: 梯度形状 {dense_grad.shape} 与权重形状 {self.values.shape} 不一致")
        if self.dense_grad is None:
            self.dense_grad = np.array(dense_grad, dtype=np.float64)
        else:
            self.dense_grad = self.dense_grad + dense_grad
        self.grad = self.dense_grad * self.mask

    def reset_positions(self, positions: np.ndarray):
        """清空指定扁平位置的动量、SEMA/EMA 值与 age"""
        for array in (self.adam_m, self.adam_v, self.sema_values, self.ema_values):
            array.reshape(-1)[positions] = 0.0
        self.age.reshape(-1)[positions] = 0

    def state_arrays(self) -> dict:
        """用于检查点保存的全部数组"""
        return {
            'values': self.values, 'mask': self.mask, 'adam_m': self.adam_m, 'adam_v': self.adam_v,
            'sema_values': self.sema_values, 'ema_values': self.ema_values, 'age': self.age,
            'init_values': self.init_values,
        }

    def load_state_arrays(self, arrays: dict):
        for key, value in arrays.items():
            current = getattr(self, key)
            if current.shape != value.shape:
                raise DimensionError(f"{self.name}.{key}: 检查点形状 {value.shape} 与 {current.shape} 不一致")
            setattr(self, key, np.array(value, dtype=current.dtype))
