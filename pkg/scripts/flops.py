"""解析式 FLOPs 统计

约定：
  - 一次乘加计 2 FLOPs；稀疏层的 FLOPs = 稠密 FLOPs × 密度（被掩码的权重不产生计算）。
  - 反向传播 = 2 × 前向，所以一次优化步对所触及的每个网络计 3 × 前向。
  - 偏置、激活函数、优化器与 EMA/SEMA 的算术不计入。
  - 参数探索只是簿记操作，不计 FLOPs。
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from scripts.errors import DomainError
from scripts.networks import GanSpec, build_ganspec
from scripts.topology import LayerSpec, allocate, allocate_uniform, ticket_sparsity


def layer_flops_forward(layer: LayerSpec, density: float = 1.0, batch: int = 1,
                        spatial: Optional[int] = None) -> float:
    """单层前向 FLOPs：2·n_in·n_out·w·h·(输出空间尺寸)·batch·density"""
    if not 0.0 < density <= 1.0:
        raise DomainError(f"密度必须在 (0,1] 内，实际为 {density}")
    spatial = layer.output_spatial if spatial is None else spatial
    return 2.0 * layer.n_params * spatial * batch * density


def network_forward_flops(layers: Sequence[LayerSpec], densities: Sequence[float], batch: int = 1) -> float:
    return float(sum(layer_flops_forward(layer, d, batch) for layer, d in zip(layers, densities) if d > 0))


@dataclass
class StepFlops:
    g: float
    d: float

    @property
    def total(self) -> float:
        return self.g + self.d


def training_step_flops_split(ganspec: GanSpec, densities_g: Sequence[float], densities_d: Sequence[float],
                              batch: int, d_steps: int = 1) -> StepFlops:
    """一个训练步（d_steps 次判别器更新 + 1 次生成器更新）按网络拆分的 FLOPs

    判别器步：G 前向生成假样本 + D 在真/假两批上前向与反向（3 × D 前向(2·batch)）
    生成器步：G 与 D 都要前向与反向（3 × (G 前向 + D 前向)）
    """
    g_fwd = network_forward_flops(ganspec.generator.layers, densities_g, batch)
    d_fwd = network_forward_flops(ganspec.discriminator.layers, densities_d, batch)
    g_part = d_steps * g_fwd + 3.0 * g_fwd
    d_part = d_steps * 3.0 * 2.0 * d_fwd + 3.0 * d_fwd
    return StepFlops(g=g_part, d=d_part)


def training_step_flops(ganspec: GanSpec, densities_g: Sequence[float], densities_d: Sequence[float],
                        batch: int, d_steps: int = 1) -> float:
    return training_step_flops_split(ganspec, densities_g, densities_d, batch, d_steps).total


def testing_flops(ganspec: GanSpec, densities_g: Sequence[float]) -> float:
    """生成单个样本的 FLOPs，只依赖生成器"""
    return network_forward_flops(ganspec.generator.layers, densities_g, batch=1)


def dense_densities(layers: Sequence[LayerSpec]):
    return [1.0] * len(layers)


@dataclass
class FlopsLedger:
    """累计训练 FLOPs 与每样本测试 FLOPs，并按稠密 GAN 归一化

    训练计算按「分段」记录：相邻且每步 FLOPs 相同的训练步合并为一段 (step_g, step_d, n_steps)，
    总量为各段 step·n_steps 之和，因此稠密运行的比值恰好为 1.0。
    train_ratio 统计 G 与 D 的全部训练计算；train_ratio_g 只统计归属于生成器的部分，
    对应「得到最终稀疏生成器所需的训练计算」。
    """
    dense_train_reference_g: float
    dense_train_reference_d: float
    dense_test_reference: float
    test_per_sample: float = 0.0
    segments: List[dict] = field(default_factory=list)

    @classmethod
    def for_run(cls, reference_spec: GanSpec, steps: int, batch: int, d_steps: int = 1) -> 'FlopsLedger':
        """以「同样步数的稠密训练」作为归一化基准"""
        dense_step = training_step_flops_split(
            reference_spec,
            dense_densities(reference_spec.generator.layers),
            dense_densities(reference_spec.discriminator.layers),
            batch, d_steps,
        )
        dense_test = testing_flops(reference_spec, dense_densities(reference_spec.generator.layers))
        return cls(dense_train_reference_g=dense_step.g * steps,
                   dense_train_reference_d=dense_step.d * steps,
                   dense_test_reference=dense_test)

    def record_steps(self, ganspec: GanSpec, densities_g, densities_d, batch: int,
                     d_steps: int = 1, n_steps: int = 1, phase: str = 'train'):
        if n_steps < 1:
            return
        step = training_step_flops_split(ganspec, densities_g, densities_d, batch, d_steps)
        last = self.segments[-1] if self.segments else None
        if last and last['phase'] == phase and last['step_g'] == step.g and last['step_d'] == step.d:
            last['n_steps'] += n_steps
        else:
            self.segments.append({'phase': phase, 'step_g': step.g, 'step_d': step.d, 'n_steps': n_steps})

    def set_test(self, ganspec: GanSpec, densities_g):
        self.test_per_sample = testing_flops(ganspec, densities_g)

    @property
    def train_g(self) -> float:
        return float(sum(seg['step_g'] * seg['n_steps'] for seg in self.segments))

    @property
    def train_d(self) -> float:
        return float(sum(seg['step_d'] * seg['n_steps'] for seg in self.segments))

    @property
    def phases(self) -> Dict[str, float]:
        totals: Dict[str, float] = {}
        for seg in self.segments:
            totals[seg['phase']] = totals.get(seg['phase'], 0.0) + (seg['step_g'] + seg['step_d']) * seg['n_steps']
        return totals

    @property
    def dense_train_reference(self) -> float:
        return self.dense_train_reference_g + self.dense_train_reference_d

    @property
    def train_total(self) -> float:
        return self.train_g + self.train_d

    @property
    def train_ratio(self) -> float:
        return self.train_total / self.dense_train_reference

    @property
    def train_ratio_g(self) -> float:
        return self.train_g / self.dense_train_reference_g

    @property
    def test_ratio(self) -> float:
        return self.test_per_sample / self.dense_test_reference

    def to_dict(self) -> dict:
        data = asdict(self)
        data.update(train_g=self.train_g, train_d=self.train_d, train_total=self.train_total,
                    train_ratio=self.train_ratio, train_ratio_g=self.train_ratio_g,
                    test_ratio=self.test_ratio, phases=self.phases)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'FlopsLedger':
        return cls(
            dense_train_reference_g=data['dense_train_reference_g'],
            dense_train_reference_d=data['dense_train_reference_d'],
            dense_test_reference=data['dense_test_reference'],
            test_per_sample=data.get('test_per_sample', 0.0),
            segments=[dict(seg) for seg in data.get('segments', [])],
        )


def uniform_densities(layers: Sequence[LayerSpec], s: float):
    return allocate_uniform(layers, s).densities


def pf_total_flops_split(config, ganspec: GanSpec, densities_g=None, densities_d=None) -> StepFlops:
    """剪枝-微调基线的训练 FLOPs（按网络拆分）：稠密训练 steps 步 + 固定掩码微调 finetune_steps 步

    未给出密度时按逐层均匀剪枝估计（prune_target=G 时判别器保持稠密）。
    """
    g_layers, d_layers = ganspec.generator.layers, ganspec.discriminator.layers
    dense_step = training_step_flops_split(ganspec, dense_densities(g_layers), dense_densities(d_layers),
                                           config.batch, config.d_steps)
    if densities_g is None:
        densities_g = uniform_densities(g_layers, config.s_G)
    if densities_d is None:
        s_d = config.s_D if config.prune_target == 'G_and_D' else 0.0
        densities_d = uniform_densities(d_layers, s_d)
    sparse_step = training_step_flops_split(ganspec, densities_g, densities_d, config.batch, config.d_steps)
    finetune_steps = config.steps if config.finetune_steps is None else config.finetune_steps
    return StepFlops(
        g=config.steps * dense_step.g + finetune_steps * sparse_step.g,
        d=config.steps * dense_step.d + finetune_steps * sparse_step.d,
    )


def pf_total_flops(config, ganspec: GanSpec, densities_g=None, densities_d=None) -> float:
    return pf_total_flops_split(config, ganspec, densities_g, densities_d).total


def pf_flops_ratio(config, ganspec: GanSpec, densities_g=None, densities_d=None, scope: str = 'total') -> float:
    """PF 训练 FLOPs 相对稠密训练 steps 步的倍数，scope ∈ {total, generator}"""
    g_layers, d_layers = ganspec.generator.layers, ganspec.discriminator.layers
    dense_step = training_step_flops_split(ganspec, dense_densities(g_layers), dense_densities(d_layers),
                                           config.batch, config.d_steps)
    split = pf_total_flops_split(config, ganspec, densities_g, densities_d)
    if scope == 'generator':
        return split.g / (config.steps * dense_step.g)
    return split.total / (config.steps * dense_step.total)


def _ratio(value: float, reference: float) -> float:
    return value / reference if reference else 0.0


def method_flops_ratios(config, method: str, s_G: float, s_D: float) -> dict:
    """不训练，按解析式估计某个方法在 (s_G, s_D) 下的 (训练, 生成器训练, 测试) FLOPs 比值

    stu 与 static 使用配置的分配方案；剪枝类基线按逐层均匀剪枝估计。
    """
    spec = build_ganspec(config.arch)
    g_layers, d_layers = spec.generator.layers, spec.discriminator.layers
    batch, d_steps = config.batch, config.d_steps
    dense = training_step_flops_split(spec, dense_densities(g_layers), dense_densities(d_layers), batch, d_steps)
    dense_test = testing_flops(spec, dense_densities(g_layers))
    d_target = s_D if config.prune_target == 'G_and_D' else 0.0

    if method == 'dense':
        split, test = dense, dense_test
        steps_factor = 1.0
    elif method in ('stu', 'static'):
        dg = allocate(g_layers, s_G, config.allocation).densities
        dd = allocate(d_layers, s_D, config.allocation).densities
        split = training_step_flops_split(spec, dg, dd, batch, d_steps)
        test, steps_factor = testing_flops(spec, dg), 1.0
    elif method == 'small_dense':
        small = build_ganspec(config.arch, width_mult=config.arch.width_mult)
        split = training_step_flops_split(small, dense_densities(small.generator.layers),
                                          dense_densities(small.discriminator.layers), batch, d_steps)
        test, steps_factor = testing_flops(small, dense_densities(small.generator.layers)), 1.0
    elif method in ('pf_global', 'pf_uniform'):
        cell = config.model_copy(update={'s_G': s_G, 's_D': s_D})
        split = pf_total_flops_split(cell, spec)
        test = testing_flops(spec, uniform_densities(g_layers, s_G))
        steps_factor = float(config.steps)
    elif method == 'ticket':
        rounds = config.ticket_rounds
        g, d = 0.0, 0.0
        for r in range(rounds + 1):
            dg = uniform_densities(g_layers, ticket_sparsity(s_G, r, rounds))
            dd = uniform_densities(d_layers, ticket_sparsity(d_target, r, rounds))
            step = training_step_flops_split(spec, dg, dd, batch, d_steps)
            g, d = g + step.g, d + step.d
        split = StepFlops(g, d)
        test = testing_flops(spec, uniform_densities(g_layers, s_G))
        steps_factor = 1.0
    else:
        raise DomainError(f"未知的方法: {method}")

    return {
        'method': method, 's_G': s_G, 's_D': s_D,
        'train_ratio': _ratio(split.total, dense.total * steps_factor),
        'train_ratio_g': _ratio(split.g, dense.g * steps_factor),
        'test_ratio': _ratio(test, dense_test),
    }


def flops_table(config, methods: Sequence[str], s_G_values: Sequence[float],
                s_D_values: Sequence[float]) -> List[dict]:
    """按 (method, s_D, s_G) 展开的 FLOPs 比值表"""
    return [method_flops_ratios(config, method, s_G, s_D)
            for method in methods for s_D in s_D_values for s_G in s_G_values]
