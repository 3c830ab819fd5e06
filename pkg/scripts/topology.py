"""稀疏度定义、逐层密度分配（uniform / ER / ERK）、随机掩码初始化与幅值剪枝

所有 TopK 都按 (|值| 降序, 扁平索引升序) 排序，平局时保留索引更小的位置。
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from scripts.errors import DomainError
from scripts.sparse_param import SparseParam


@dataclass(frozen=True)
class LayerSpec:
    """一层的形状描述

    dense 层: fan_in=n^{l-1}, fan_out=n^l, kernel=(1,1)
    conv2d 层: fan_in=c_in, fan_out=c_out, kernel=(kh,kw), spatial 为输出特征图尺寸
    """
    kind: str
    fan_in: int
    fan_out: int
    kernel_h: int = 1
    kernel_w: int = 1
    spatial: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in ('dense', 'conv2d'):
            raise DomainError(f"未知的层类型: {self.kind}")
        counts = (self.fan_in, self.fan_out, self.kernel_h, self.kernel_w) + tuple(self.spatial)
        if any(c < 1 for c in counts):
            raise DomainError(f"层的各项计数必须 ≥ 1: {self}")

    @property
    def n_params(self) -> int:
        return self.fan_in * self.fan_out * self.kernel_h * self.kernel_w

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == 'dense':
            return (self.fan_in, self.fan_out)
        return (self.fan_out, self.fan_in, self.kernel_h, self.kernel_w)

    @property
    def output_spatial(self) -> int:
        return self.spatial[0] * self.spatial[1]


@dataclass
class TopologyPlan:
    densities: List[float]
    kept: List[int]
    sparsity: float
    method: str = 'uniform'
    sizes: List[int] = field(default_factory=list)

    @property
    def total_kept(self) -> int:
        return int(sum(self.kept))


def round_half_up(x: float) -> int:
    """四舍五入到整数（.5 进位），先消除浮点误差"""
    return int(math.floor(round(x, 9) + 0.5))


def _check_sparsity(s: float):
    if not 0.0 <= s < 1.0:
        raise DomainError(f"稀疏度必须在 [0, 1) 内，实际为 {s}")


def budget(layers: Sequence[LayerSpec], s: float) -> int:
    """全局保留权重数 round((1-s)·Σ N_l)"""
    return round_half_up((1.0 - s) * sum(layer.n_params for layer in layers))


def _plan_from_counts(layers, kept, s, method) -> TopologyPlan:
    sizes = [layer.n_params for layer in layers]
    return TopologyPlan(
        densities=[k / n for k, n in zip(kept, sizes)],
        kept=list(kept),
        sparsity=s,
        method=method,
        sizes=sizes,
    )


def allocate_uniform(layers: Sequence[LayerSpec], s: float) -> TopologyPlan:
    """每层使用相同密度 1-s，每层至少保留 1 个权重"""
    _check_sparsity(s)
    kept = [min(layer.n_params, max(1, round_half_up((1.0 - s) * layer.n_params))) for layer in layers]
    return _plan_from_counts(layers, kept, s, 'uniform')


def raw_density(layer: LayerSpec, method: str = 'erk') -> float:
    """ERK: (n_in+n_out+w+h)/(n_in·n_out·w·h)；ER 去掉卷积核项: (n_in+n_out)/(n_in·n_out)

    ERK 只对卷积层使用卷积核项，全连接层按 ER 计算。
    """
    if method == 'erk' and layer.kind == 'conv2d':
        return (layer.fan_in + layer.fan_out + layer.kernel_w + layer.kernel_h) / layer.n_params
    if method in ('erk', 'er'):
        return (layer.fan_in + layer.fan_out) / (layer.fan_in * layer.fan_out)
    raise DomainError(f"未知的分配方法: {method}")


def erk_scale(layers: Sequence[LayerSpec], s: float, method: str = 'erk') -> Tuple[float, List[bool]]:
    """求全局缩放系数 ε 与被截断为稠密的层

    密度 ε·raw_l 超过 1 的层被截断为 1，然后在剩余层上重新求 ε，直到不再出现新的截断。
    """
    target = budget(layers, s)
    raw = [raw_density(layer, method) for layer in layers]
    sizes = [layer.n_params for layer in layers]
    capped = [False] * len(layers)

    while True:
        dense_count = sum(n for n, c in zip(sizes, capped) if c)
        remaining = target - dense_count
        divisor = sum(r * n for r, n, c in zip(raw, sizes, capped) if not c)
        if divisor == 0:
            if remaining != 0:
                raise DomainError(f"稀疏度 {s} 不可行：所有层都已稠密，仍有 {remaining} 个权重无法分配")
            return 0.0, capped
        epsilon = remaining / divisor
        new_caps = [i for i, (r, c) in enumerate(zip(raw, capped)) if not c and epsilon * r > 1.0]
        if not new_caps:
            return epsilon, capped
        for i in new_caps:
            logger.debug(f"第 {i} 层的 ERK 密度超过 1，截断为稠密")
            capped[i] = True


def allocate_erk(layers: Sequence[LayerSpec], s: float, method: str = 'erk') -> TopologyPlan:
    """按 ERK（或 ER）比例分配逐层密度，总保留数满足全局预算"""
    _check_sparsity(s)
    if s == 0.0:
        return _plan_from_counts(layers, [layer.n_params for layer in layers], s, method)

    epsilon, capped = erk_scale(layers, s, method)
    kept = []
    for layer, is_dense in zip(layers, capped):
        if is_dense:
            kept.append(layer.n_params)
        else:
            count = round_half_up(epsilon * raw_density(layer, method) * layer.n_params)
            kept.append(min(layer.n_params, max(1, count)))
    return _plan_from_counts(layers, kept, s, method)


def allocate(layers: Sequence[LayerSpec], s: float, method: str) -> TopologyPlan:
    if method == 'uniform':
        return allocate_uniform(layers, s)
    return allocate_erk(layers, s, method)


def init_masks(plan: TopologyPlan, layers: Sequence[LayerSpec], rng: np.random.Generator) -> List[np.ndarray]:
    """每层无放回地均匀随机放置 kept_l 个 1"""
    masks = []
    for layer, keep in zip(layers, plan.kept):
        flat = np.zeros(layer.n_params, dtype=np.float64)
        if keep >= layer.n_params:
            flat[:] = 1.0
        else:
            flat[rng.choice(layer.n_params, size=keep, replace=False)] = 1.0
        masks.append(flat.reshape(layer.weight_shape))
    return masks


def topk_order(magnitudes: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """按幅值降序、位置升序排列 positions"""
    return positions[np.lexsort((positions, -magnitudes))]


def _prune_mask(param: SparseParam, keep: int) -> np.ndarray:
    active = np.flatnonzero(param.mask.reshape(-1))
    ordered = topk_order(np.abs(param.values.reshape(-1)[active]), active)
    mask = np.zeros(param.size, dtype=np.float64)
    mask[ordered[:keep]] = 1.0
    return mask.reshape(param.shape)


def magnitude_prune_uniform(params: Sequence[SparseParam], s: float) -> List[np.ndarray]:
    """逐层独立保留 round((1-s)·N_l) 个幅值最大的权重（至少 1 个）"""
    _check_sparsity(s)
    masks = []
    for param in params:
        keep = max(1, round_half_up((1.0 - s) * param.size))
        masks.append(_prune_mask(param, min(keep, param.n_active)))
    return masks


def magnitude_prune_global(params: Sequence[SparseParam], s: float) -> List[np.ndarray]:
    """在所有层拼接后做一次 TopK，允许某层被整体剪空"""
    _check_sparsity(s)
    sizes = [param.size for param in params]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat_values = np.concatenate([param.values.reshape(-1) for param in params])
    flat_mask = np.concatenate([param.mask.reshape(-1) for param in params])

    keep = min(round_half_up((1.0 - s) * sum(sizes)), int(flat_mask.sum()))
    active = np.flatnonzero(flat_mask)
    ordered = topk_order(np.abs(flat_values[active]), active)
    selected = np.zeros(flat_values.size, dtype=np.float64)
    selected[ordered[:keep]] = 1.0

    return [selected[offsets[i]:offsets[i + 1]].reshape(param.shape) for i, param in enumerate(params)]


def apply_masks(params: Sequence[SparseParam], masks: Sequence[np.ndarray], reset_state: bool = True):
    """把新掩码写入参数；被移除的位置清零并重置其优化器状态"""
    for param, mask in zip(params, masks):
        removed = np.flatnonzero((param.mask.reshape(-1) == 1.0) & (mask.reshape(-1) == 0.0))
        param.mask = np.array(mask, dtype=np.float64)
        param.values *= param.mask
        if reset_state and removed.size:
            param.reset_positions(removed)


def sparsity_of(params: Sequence[SparseParam]) -> float:
    """可剪枝参数的整体稀疏度（偏置不计入）"""
    prunable = [p for p in params if p.prunable]
    total = sum(p.size for p in prunable)
    if total == 0:
        return 0.0
    return 1.0 - sum(p.n_active for p in prunable) / total


def layer_densities(params: Sequence[SparseParam]) -> List[float]:
    return [p.density for p in params if p.prunable]


def describe_plan(plan: TopologyPlan, names: Optional[Sequence[str]] = None) -> List[dict]:
    names = names or [f"layer{i}" for i in range(len(plan.kept))]
    return [
        {"layer": name, "size": size, "kept": kept, "density": round(density, 6)}
        for name, size, kept, density in zip(names, plan.sizes, plan.kept, plan.densities)
    ]


def ticket_sparsity(s: float, round_index: int, rounds: int) -> float:
    """迭代剪枝第 r 轮的目标稀疏度 1 - (1-s)^{r/R}"""
    _check_sparsity(s)
    return 1.0 - (1.0 - s) ** (round_index / rounds)
