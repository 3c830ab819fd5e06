"""生成器（或判别器）的参数探索：周期性剪枝并按梯度重新分配"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from scripts.errors import ContractError, DomainError, ScheduleExhausted
from scripts.mask_io import support_hash
from scripts.sparse_param import SparseParam
from scripts.topology import LayerSpec, topk_order


@dataclass
class ExplorationSchedule:
    delta_t: int
    p0: float
    decay: str
    t_end: int

    def __post_init__(self):
        if self.delta_t < 1:
            raise DomainError(f"ΔT 必须 ≥ 1，实际为 {self.delta_t}")
        if not 0.0 < self.p0 < 1.0:
            raise DomainError(f"初始剪枝率必须在 (0,1) 内，实际为 {self.p0}")
        if self.decay not in ('cosine', 'constant'):
            raise DomainError(f"未知的衰减方式: {self.decay}")
        if self.t_end < 0:
            raise DomainError(f"t_end 不能为负: {self.t_end}")

    def should_explore(self, t: int) -> bool:
        return t % self.delta_t == 0 and t <= self.t_end


def pruning_rate(sched: ExplorationSchedule, t: int) -> float:
    """cosine: p_t = p0/2·(1+cos(π·t/t_end))；constant: p_t = p0"""
    if t > sched.t_end:
        raise ScheduleExhausted(f"步数 {t} 超过 t_end={sched.t_end}")
    if sched.decay == 'constant':
        return sched.p0
    if sched.t_end == 0:
        return sched.p0
    return 0.5 * sched.p0 * (1.0 + math.cos(math.pi * t / sched.t_end))


def prune_topk(param: SparseParam, p_t: float,
               max_k: Optional[int] = None) -> Tuple[SparseParam, int, np.ndarray]:
    """在激活权重中保留 ⌈(1-p_t)·n_active⌉ 个幅值最大者

    Args:
        max_k: 剪枝数量上限（排除刚剪位置时不能超过现有零位置数）

    Returns:
        (参数, 剪掉的数量 k, 被剪位置的扁平索引)
    """
    n_active = param.n_active
    if n_active < 1:
        raise ContractError(f"{param.name}: 没有激活的权重可以剪枝")
    retain = min(n_active, math.ceil((1.0 - p_t) * n_active - 1e-9))
    if max_k is not None:
        retain = max(retain, n_active - max(0, max_k))
    k = n_active - retain
    if k == 0:
        return param, 0, np.empty(0, dtype=np.int64)

    active = np.flatnonzero(param.mask.reshape(-1))
    ordered = topk_order(np.abs(param.values.reshape(-1)[active]), active)
    pruned = np.sort(ordered[retain:])
    param.mask.reshape(-1)[pruned] = 0.0
    param.values.reshape(-1)[pruned] = 0.0
    param.reset_positions(pruned)
    return param, k, pruned


def _choose_regrowth(candidates: np.ndarray, scores: np.ndarray, k: int,
                     mode: str, rng: Optional[np.random.Generator]) -> np.ndarray:
    if mode == 'random':
        if rng is None:
            raise ContractError("随机再生长需要提供 rng")
        return np.sort(rng.choice(candidates, size=k, replace=False))
    return topk_order(scores, candidates)[:k]


def regrow_gradient(param: SparseParam, dense_grad: np.ndarray, k: int,
                    exclude: Optional[np.ndarray] = None, mode: str = 'gradient',
                    rng: Optional[np.random.Generator] = None) -> Tuple[SparseParam, np.ndarray]:
    """在掩码为 0 的位置中激活 |dense_grad| 最大的 k 个，新权重初始化为 0

    Args:
        exclude: 不参与再生长的扁平位置（例如刚被剪掉的位置）
        mode: gradient（默认）或 random（消融）
    Returns:
        (参数, 新激活位置的扁平索引)
    """
    if k == 0:
        return param, np.empty(0, dtype=np.int64)
    if dense_grad is None:
        raise ContractError(f"{param.name}: 没有可用于再生长的稠密梯度")
    candidates = np.flatnonzero(param.mask.reshape(-1) == 0.0)
    if exclude is not None and exclude.size:
        candidates = np.setdiff1d(candidates, exclude, assume_unique=True)
    if k > candidates.size:
        raise ContractError(f"{param.name}: 需要再生长 {k} 个权重，但只有 {candidates.size} 个零位置")

    scores = np.abs(np.asarray(dense_grad).reshape(-1)[candidates])
    grown = np.sort(_choose_regrowth(candidates, scores, k, mode, rng))
    param.mask.reshape(-1)[grown] = 1.0
    param.values.reshape(-1)[grown] = 0.0
    param.reset_positions(grown)
    return param, grown


@dataclass
class ItopTracker:
    """记录训练过程中曾经被激活过的位置"""
    ever_active: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: Sequence[SparseParam]) -> 'ItopTracker':
        tracker = cls()
        tracker.update(params)
        return tracker

    def update(self, params: Sequence[SparseParam]):
        for param in params:
            if not param.prunable:
                continue
            current = param.mask.astype(bool)
            if param.name in self.ever_active:
                self.ever_active[param.name] |= current
            else:
                self.ever_active[param.name] = current.copy()

    @property
    def union_count(self) -> int:
        return int(sum(int(a.sum()) for a in self.ever_active.values()))


def itop_rate(tracker: ItopTracker, layers: Sequence[LayerSpec]) -> float:
    """曾激活位置数 / 稠密参数总数"""
    total = sum(layer.n_params for layer in layers)
    if total == 0:
        return 0.0
    return tracker.union_count / total


@dataclass
class ExplorationEvent:
    step: int
    network: str
    layer: str
    k: int
    pre_hash: str
    post_hash: str

    def to_line(self) -> str:
        return (f"step={self.step} net={self.network} layer={self.layer} k={self.k} "
                f"pre={self.pre_hash} post={self.post_hash}")


@dataclass
class ExplorationOptions:
    scope: str = 'layer'
    regrow: str = 'gradient'
    exclude_pruned: bool = False


def _explore_global(params, p_t, options, rng) -> Dict[str, int]:
    """跨层的全局 TopK：总激活数守恒，逐层密度可以变化"""
    sizes = [p.size for p in params]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    values = np.concatenate([p.values.reshape(-1) for p in params])
    mask = np.concatenate([p.mask.reshape(-1) for p in params])
    grads = np.concatenate([np.asarray(p.dense_grad).reshape(-1) for p in params])

    active = np.flatnonzero(mask)
    retain = min(active.size, math.ceil((1.0 - p_t) * active.size - 1e-9))
    if options.exclude_pruned:
        retain = max(retain, 2 * active.size - mask.size)
    k = active.size - retain
    if k == 0:
        return {p.name: 0 for p in params}
    pruned = np.sort(topk_order(np.abs(values[active]), active)[retain:])
    mask[pruned] = 0.0
    candidates = np.flatnonzero(mask == 0.0)
    if options.exclude_pruned:
        candidates = np.setdiff1d(candidates, pruned, assume_unique=True)
    if k > candidates.size:
        raise ContractError(f"需要再生长 {k} 个权重，但只有 {candidates.size} 个零位置")
    grown = np.sort(_choose_regrowth(candidates, np.abs(grads[candidates]), k, options.regrow, rng))

    counts = {}
    for i, param in enumerate(params):
        lo, hi = offsets[i], offsets[i + 1]
        local_pruned = pruned[(pruned >= lo) & (pruned < hi)] - lo
        local_grown = grown[(grown >= lo) & (grown < hi)] - lo
        param.mask.reshape(-1)[local_pruned] = 0.0
        param.values.reshape(-1)[local_pruned] = 0.0
        param.reset_positions(local_pruned)
        param.mask.reshape(-1)[local_grown] = 1.0
        param.values.reshape(-1)[local_grown] = 0.0
        param.reset_positions(local_grown)
        counts[param.name] = int(local_pruned.size)
    return counts


def explore_step(params: Sequence[SparseParam], sched: ExplorationSchedule, t: int,
                 tracker: ItopTracker, options: ExplorationOptions = None,
                 rng: Optional[np.random.Generator] = None,
                 network: str = 'G') -> List[ExplorationEvent]:
    """一次剪枝-再分配

    逐层模式下每层剪掉 k 个再长回 k 个，层密度不变；dense_grad 取自最近一次反向传播。
    计划结束（t > t_end）时不做任何修改。
    """
    options = options or ExplorationOptions()
    try:
        p_t = pruning_rate(sched, t)
    except ScheduleExhausted:
        return []

    targets = [p for p in params if p.prunable]
    before = {p.name: support_hash(p.mask) for p in targets}
    if options.scope == 'global':
        counts = _explore_global(targets, p_t, options, rng)
    elif options.scope == 'layer':
        counts = {}
        for param in targets:
            dense_grad = param.dense_grad
            max_k = param.size - param.n_active if options.exclude_pruned else None
            _, k, pruned = prune_topk(param, p_t, max_k)
            regrow_gradient(param, dense_grad, k,
                            exclude=pruned if options.exclude_pruned else None,
                            mode=options.regrow, rng=rng)
            counts[param.name] = k
    else:
        raise DomainError(f"未知的探索范围: {options.scope}")

    tracker.update(targets)
    events = []
    for param in targets:
        event = ExplorationEvent(t, network, param.name, counts[param.name],
                                 before[param.name], support_hash(param.mask))
        logger.debug(f"参数探索 {event.to_line()} p_t={p_t:.4f}")
        events.append(event)
    return events
