"""稀疏 GAN 训练：带参数探索的稀疏训练主循环，以及静态稀疏、稠密、小稠密、剪枝-微调与迭代剪枝（ticket）基线

每一步严格按照: 判别器更新（使用当前 G）→ 生成器更新（使用更新后的 D）→ 生成器影子权重更新
→ 每 ΔT 步对 explore_target 做一次参数探索（直到 t_end）。
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from loguru import logger

from scripts import autodiff as ad
from scripts.datasets import DataSampler, make_sampler
from scripts.errors import ContractError, DomainError, NonFiniteError
from scripts.exploration import ExplorationEvent, ItopTracker, explore_step, itop_rate
from scripts.flops import FlopsLedger
from scripts.mask_io import support_hash
from scripts.networks import GanSpec, Network, build_ganspec
from scripts.optimizer import AdamConfig, adam_step_all, update_averages
from scripts.quality_metrics import MetricsReport, evaluate_samples
from scripts.run_config import TrainConfig, config_hash
from scripts.topology import (allocate, apply_masks, init_masks, magnitude_prune_global, magnitude_prune_uniform,
                              sparsity_of, ticket_sparsity)

# probe(event, step, G, D)，event ∈ {d_grad, g_grad}，在反向传播之后、Adam 更新之前调用
Probe = Callable[[str, int, Network, Network], None]

RNG_STREAMS = ('init', 'data', 'latent', 'explore')

METRIC_COLUMNS = ['step', 'd_loss', 'g_loss', 'coverage', 'hq_ratio', 'w1', 'itop_rate', 'flops_cum']


def d_loss(D: Network, G: Network, real_batch: np.ndarray, z_batch: np.ndarray) -> ad.Tensor:
    """BCE(D(real), 1) + BCE(D(G(z)), 0)；假样本与 G 断开，梯度只流向 D"""
    if len(real_batch) == 0 or len(z_batch) == 0:
        raise ContractError("d_loss 的批次不能为空")
    graph = ad.Graph()
    fake = graph.constant(G(z_batch))
    real_logits = D.forward(graph.constant(real_batch))
    fake_logits = D.forward(fake)
    real_loss = ad.bce_logits_loss(real_logits, np.ones(len(real_batch)))
    fake_loss = ad.bce_logits_loss(fake_logits, np.zeros(len(z_batch)))
    return real_loss + fake_loss


def g_loss(D: Network, G: Network, z_batch: np.ndarray, mode: str = 'nonsaturating') -> ad.Tensor:
    """生成器损失，梯度穿过冻结的 D 只写入 G

    minimax: mean log(1 - σ(D(G(z)))) = -BCE(D(G(z)), 0)
    nonsaturating: BCE(D(G(z)), 1)
    """
    if len(z_batch) == 0:
        raise ContractError("g_loss 的批次不能为空")
    graph = ad.Graph()
    fake = G.forward(graph.constant(z_batch))
    logits = D.forward(fake, frozen=True)
    if mode == 'minimax':
        return -ad.bce_logits_loss(logits, np.zeros(len(z_batch)))
    if mode == 'nonsaturating':
        return ad.bce_logits_loss(logits, np.ones(len(z_batch)))
    raise DomainError(f"未知的损失模式: {mode}")


def sample(G: Network, n: int, seed: int, source: str = 'sema') -> np.ndarray:
    """用新抽取的隐变量生成 n 个样本；同一 seed 结果相同"""
    if n < 1:
        raise ContractError(f"样本数必须 ≥ 1，实际为 {n}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, G.spec.input_dim))
    return G(z, source=source)


def averaging_source(mode: str) -> str:
    return {'sema': 'sema', 'ema': 'ema', 'none': 'values'}[mode]


@dataclass
class TrainingState:
    """一次运行的全部可变状态；检查点保存的就是它"""
    G: Network
    D: Network
    ledger: FlopsLedger
    rngs: Dict[str, np.random.Generator]
    tracker_G: ItopTracker
    tracker_D: ItopTracker
    initial_masks: Dict[str, List[np.ndarray]]
    step: int = 0
    d_updates: int = 0
    g_updates: int = 0
    metrics: List[dict] = field(default_factory=list)
    events: List[ExplorationEvent] = field(default_factory=list)
    mask_snapshots: Dict[int, Dict[str, List[np.ndarray]]] = field(default_factory=dict)
    reference: Optional[np.ndarray] = None

    def snapshot_masks(self, step: int):
        self.mask_snapshots[step] = {'G': self.G.masks(), 'D': self.D.masks()}

    def mask_hashes(self) -> Dict[str, List[str]]:
        return {
            'G': [support_hash(w.mask) for w in self.G.weights],
            'D': [support_hash(w.mask) for w in self.D.weights],
        }


@dataclass
class RunResult:
    config: TrainConfig
    config_hash: str
    state: TrainingState
    diverged: bool = False
    failure: Optional[str] = None
    final: Optional[MetricsReport] = None
    wall_time: float = 0.0
    completed: bool = True

    @property
    def metrics(self) -> List[dict]:
        return self.state.metrics

    @property
    def events(self) -> List[ExplorationEvent]:
        return self.state.events

    @property
    def ledger(self) -> FlopsLedger:
        return self.state.ledger

    @property
    def itop_series(self) -> List[tuple]:
        return [(row['step'], row['itop_rate']) for row in self.state.metrics]

    def final_masks(self) -> Dict[str, List[np.ndarray]]:
        return {'G': self.state.G.masks(), 'D': self.state.D.masks()}

    def summary(self) -> dict:
        """summary.json 的内容；最终指标缺失（如发散）时为 None"""
        state = self.state
        final = self.final.to_dict() if self.final else {'mode_coverage': None, 'hq_ratio': None, 'w1': None}
        return {
            'config_hash': self.config_hash,
            'method': self.config.method,
            's_G': self.config.s_G,
            's_D': self.config.s_D,
            'seed': self.config.seed,
            'steps_completed': state.step,
            'completed': self.completed,
            'diverged': self.diverged,
            'failure': self.failure,
            'final_sparsity_G': sparsity_of(state.G.params),
            'final_sparsity_D': sparsity_of(state.D.params),
            'itop_rate_G': itop_rate(state.tracker_G, state.G.layers),
            'itop_rate_D': itop_rate(state.tracker_D, state.D.layers),
            'n_events': len(state.events),
            'flops': state.ledger.to_dict(),
            'wall_time': self.wall_time,
            **final,
        }


def spawn_rngs(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


def init_state(config: TrainConfig, ganspec: GanSpec, reference_spec: Optional[GanSpec] = None,
               s_G: Optional[float] = None, s_D: Optional[float] = None,
               ledger_steps: Optional[int] = None) -> TrainingState:
    """按分配方案随机放置掩码并初始化权重"""
    s_G = config.s_G if s_G is None else s_G
    s_D = config.s_D if s_D is None else s_D
    rngs = spawn_rngs(config.seed)
    init_rng = rngs['init']
    g_plan = allocate(ganspec.generator.layers, s_G, config.allocation)
    d_plan = allocate(ganspec.discriminator.layers, s_D, config.allocation)
    g_masks = init_masks(g_plan, ganspec.generator.layers, init_rng)
    d_masks = init_masks(d_plan, ganspec.discriminator.layers, init_rng)
    G = Network(ganspec.generator, g_masks, init_rng)
    D = Network(ganspec.discriminator, d_masks, init_rng)

    ledger = FlopsLedger.for_run(reference_spec or ganspec, ledger_steps or config.steps,
                                 config.batch, config.d_steps)
    state = TrainingState(
        G=G, D=D, ledger=ledger, rngs=rngs,
        tracker_G=ItopTracker.from_params(G.params),
        tracker_D=ItopTracker.from_params(D.params),
        initial_masks={'G': G.masks(), 'D': D.masks()},
    )
    state.ledger.set_test(ganspec, G.densities())
    return state


class GanTrainer:
    """驱动一次运行的各个训练阶段

    Args:
        config: 已解析的训练配置（方法相关的字段已经落实）
        ganspec: 实际训练的网络结构
        sampler: 目标分布
        probes: 可选的顺序探针
        run_hash: 用于日志上下文与结果记录的配置哈希
    """

    def __init__(self, config: TrainConfig, ganspec: GanSpec, sampler: DataSampler,
                 state: TrainingState, probes: Optional[List[Probe]] = None, run_hash: str = '-'):
        self.config = config
        self.ganspec = ganspec
        self.sampler = sampler
        self.state = state
        self.probes = probes or []
        self.run_hash = run_hash
        self.log = logger.bind(run=run_hash)
        self.adam_G = AdamConfig(config.lr_G, config.beta1, config.beta2, config.eps)
        self.adam_D = AdamConfig(config.lr_D, config.beta1, config.beta2, config.eps)
        self.sched = config.exploration_schedule()
        self.options = config.exploration_options()
        self.source = averaging_source(config.averaging)
        self.last_losses = (float('nan'), float('nan'))
        if state.reference is None:
            state.reference = sampler.sample(config.eval_samples, np.random.default_rng(
                int(np.random.SeedSequence(config.seed).generate_state(1)[0])))

    def _probe(self, event: str, step: int):
        for probe in self.probes:
            probe(event, step, self.state.G, self.state.D)

    def train_step(self, t: int, explore: bool, phase: str):
        """一个完整的训练步；t 为阶段内步数（从 1 开始）"""
        state, config = self.state, self.config
        G, D = state.G, state.D
        rngs = state.rngs
        global_step = state.step + 1

        for _ in range(config.d_steps):
            real = self.sampler.sample(config.batch, rngs['data'])
            z = rngs['latent'].standard_normal((config.batch, self.ganspec.d_z))
            D.zero_grad()
            loss_d = d_loss(D, G, real, z)
            ad.backward(loss_d.graph, loss_d)
            self._probe('d_grad', global_step)
            state.d_updates += 1
            adam_step_all(D.params, self.adam_D, state.d_updates)

        z = rngs['latent'].standard_normal((config.batch, self.ganspec.d_z))
        G.zero_grad()
        loss_g = g_loss(D, G, z, config.loss_mode)
        ad.backward(loss_g.graph, loss_g)
        self._probe('g_grad', global_step)
        state.g_updates += 1
        adam_step_all(G.params, self.adam_G, state.g_updates)
        update_averages(G.params, config.averaging, config.ema_beta)

        state.ledger.record_steps(self.ganspec, G.densities(), D.densities(), config.batch,
                                  config.d_steps, 1, phase)
        if explore and self.sched.should_explore(t):
            self._explore(t, global_step)
        state.step = global_step
        self.last_losses = (float(loss_d.data), float(loss_g.data))

    def _explore(self, t: int, global_step: int):
        state, config = self.state, self.config
        for name, network, tracker in (('G', state.G, state.tracker_G), ('D', state.D, state.tracker_D)):
            if not config.explores(name):
                continue
            if all(w.density == 1.0 for w in network.weights):
                continue
            before = network.n_active()
            events = explore_step(network.params, self.sched, t, tracker, self.options,
                                  state.rngs['explore'], network=name)
            for event in events:
                event.step = global_step
            state.events.extend(events)
            after = network.n_active()
            if self.options.scope == 'layer' and before != after:
                raise ContractError(f"{name} 参数探索改变了逐层非零数: {before} -> {after}")
            if sum(before) != sum(after):
                raise ContractError(f"{name} 参数探索改变了总非零数: {sum(before)} -> {sum(after)}")

    def evaluate(self) -> MetricsReport:
        config = self.config
        eval_seed = int(np.random.SeedSequence(config.seed).generate_state(2)[1])
        samples = sample(self.state.G, config.eval_samples, eval_seed, self.source)
        return evaluate_samples(samples, self.sampler, self.state.reference, config.radius_mult,
                                config.n_projections, config.seed)

    def record_metrics(self):
        state = self.state
        report = self.evaluate()
        row = {
            'step': state.step,
            'd_loss': self.last_losses[0],
            'g_loss': self.last_losses[1],
            'coverage': report.mode_coverage,
            'hq_ratio': report.hq_ratio,
            'w1': report.w1,
            'itop_rate': itop_rate(state.tracker_G, state.G.layers),
            'flops_cum': state.ledger.train_total,
        }
        state.metrics.append(row)
        if self.config.snapshot_masks:
            state.snapshot_masks(state.step)
        self.log.debug(
            f"step={row['step']} d_loss={row['d_loss']:.4f} g_loss={row['g_loss']:.4f} "
            f"coverage={row['coverage']:.3f} w1={row['w1']:.4f} itop={row['itop_rate']:.4f}")
        return report

    def run_phase(self, n_steps: int, phase: str, explore: bool, start: int = 0,
                  stop_at: Optional[int] = None, on_checkpoint: Optional[Callable] = None):
        """从阶段内第 start+1 步训练到第 n_steps 步；stop_at 为全局步数上限"""
        for t in range(start + 1, n_steps + 1):
            if stop_at is not None and self.state.step >= stop_at:
                return False
            self.train_step(t, explore, phase)
            if t % self.config.eval_interval == 0 or t == n_steps:
                self.record_metrics()
                if on_checkpoint is not None:
                    on_checkpoint(self.state)
        return True


def _finish(trainer: GanTrainer, config: TrainConfig, run_hash: str, started: float,
            diverged: bool, failure: Optional[str], completed: bool) -> RunResult:
    state = trainer.state
    state.ledger.set_test(trainer.ganspec, state.G.densities())
    final = None
    if state.metrics and not diverged and completed:
        last = state.metrics[-1]
        final = MetricsReport(last['coverage'], last['hq_ratio'], last['w1'])
    elif not diverged and state.step > 0:
        try:
            final = trainer.evaluate()
        except (NonFiniteError, FloatingPointError, ContractError) as e:
            trainer.log.warning(f"警告: 最终评估失败: {e}")
    result = RunResult(config=config, config_hash=run_hash, state=state, diverged=diverged,
                       failure=failure, final=final, wall_time=time.perf_counter() - started,
                       completed=completed and not diverged)
    if diverged:
        trainer.log.warning(f"警告: 运行 {run_hash} 在第 {state.step + 1} 步发散: {failure}")
    else:
        trainer.log.info(f"已完成运行 {run_hash}: {state.step} 步, 参数探索 {len(state.events)} 次")
    return result


def train(config: TrainConfig, ganspec: GanSpec, sampler: DataSampler,
          probes: Optional[List[Probe]] = None, state: Optional[TrainingState] = None,
          reference_spec: Optional[GanSpec] = None, run_hash: Optional[str] = None,
          stop_at: Optional[int] = None, on_checkpoint: Optional[Callable] = None) -> RunResult:
    """稀疏到稀疏的 GAN 训练

    Args:
        state: 从检查点恢复的状态，为空时重新初始化
        reference_spec: FLOPs 归一化所用的稠密结构（small_dense 时为全宽网络）
        stop_at: 训练到该全局步数后停止（用于中断与恢复）
    Returns:
        RunResult；非有限值导致的发散会被记录而不是抛出
    """
    run_hash = run_hash or config_hash(config)
    started = time.perf_counter()
    if state is None:
        state = init_state(config, ganspec, reference_spec)
        if config.snapshot_masks:
            state.snapshot_masks(0)
    trainer = GanTrainer(config, ganspec, sampler, state, probes, run_hash)
    trainer.log.info(
        f"正在训练 {run_hash}: method={config.method} s_G={config.s_G} s_D={config.s_D} "
        f"explore={config.explore_target} steps={config.steps} (从第 {state.step} 步开始)")

    diverged, failure, completed = False, None, True
    try:
        completed = trainer.run_phase(config.steps, 'train', config.explore_target != 'none',
                                      start=state.step, stop_at=stop_at, on_checkpoint=on_checkpoint)
    except NonFiniteError as e:
        diverged, failure = True, str(e)
    return _finish(trainer, config, run_hash, started, diverged, failure, completed)


def _prune_masks(params, s: float, prune_mode: str):
    if prune_mode == 'global':
        return magnitude_prune_global(params, s)
    if prune_mode == 'uniform':
        return magnitude_prune_uniform(params, s)
    raise DomainError(f"未知的剪枝方式: {prune_mode}")


def _fixed_mask_phase_config(config: TrainConfig) -> TrainConfig:
    return config.model_copy(update={'explore_target': 'none'})


def _reset_optimizer(state: TrainingState):
    """把所有位置的优化器与影子权重状态清零，Adam 步数重新计数"""
    for network in (state.G, state.D):
        for param in network.params:
            param.reset_positions(np.arange(param.size))
            param.ema_values = param.values * param.mask
    state.d_updates = 0
    state.g_updates = 0


def run_pf(config: TrainConfig, ganspec: GanSpec, sampler: DataSampler, prune_mode: str = 'global',
           prune_target: Optional[str] = None, probes: Optional[List[Probe]] = None,
           run_hash: Optional[str] = None) -> RunResult:
    """剪枝-微调基线：稠密训练 steps 步 → 一次性幅值剪枝 → 固定掩码微调 finetune_steps 步

    prune_target=G 时判别器保持稠密。FLOPs 账本同时包含稠密阶段与微调阶段。
    """
    prune_target = prune_target or config.prune_target
    run_hash = run_hash or config_hash(config)
    started = time.perf_counter()
    phase_config = _fixed_mask_phase_config(config)
    state = init_state(config, ganspec, s_G=0.0, s_D=0.0)
    if config.snapshot_masks:
        state.snapshot_masks(0)
    trainer = GanTrainer(phase_config, ganspec, sampler, state, probes, run_hash)
    trainer.log.info(f"正在训练 {run_hash}: PF({prune_mode}) 稠密阶段 {config.steps} 步")

    try:
        trainer.run_phase(config.steps, 'dense', explore=False)
        g_weights = state.G.weights
        apply_masks(g_weights, _prune_masks(g_weights, config.s_G, prune_mode))
        if prune_target == 'G_and_D':
            d_weights = state.D.weights
            apply_masks(d_weights, _prune_masks(d_weights, config.s_D, prune_mode))
        _reset_optimizer(state)
        state.initial_masks = {'G': state.G.masks(), 'D': state.D.masks()}
        trainer.log.info(
            f"已剪枝: G 稀疏度 {sparsity_of(state.G.params):.4f}, D 稀疏度 {sparsity_of(state.D.params):.4f}")
        trainer.run_phase(config.total_finetune_steps, 'finetune', explore=False)
    except NonFiniteError as e:
        return _finish(trainer, config, run_hash, started, True, str(e), False)
    return _finish(trainer, config, run_hash, started, False, None, True)


def run_ticket(config: TrainConfig, ganspec: GanSpec, sampler: DataSampler,
               probes: Optional[List[Probe]] = None, run_hash: Optional[str] = None) -> RunResult:
    """迭代幅值剪枝并回退到初始权重，最后一轮在目标稀疏度下训练"""
    run_hash = run_hash or config_hash(config)
    started = time.perf_counter()
    rounds = config.ticket_rounds
    state = init_state(config, ganspec, s_G=0.0, s_D=0.0)
    if config.snapshot_masks:
        state.snapshot_masks(0)
    trainer = GanTrainer(_fixed_mask_phase_config(config), ganspec, sampler, state, probes, run_hash)
    trainer.log.info(f"正在训练 {run_hash}: 迭代剪枝 ticket, {rounds} 轮剪枝")

    try:
        for r in range(1, rounds + 1):
            trainer.run_phase(config.steps, f"round{r}", explore=False)
            s_G_r = ticket_sparsity(config.s_G, r, rounds)
            apply_masks(state.G.weights, magnitude_prune_global(state.G.weights, s_G_r))
            if config.prune_target == 'G_and_D':
                s_D_r = ticket_sparsity(config.s_D, r, rounds)
                apply_masks(state.D.weights, magnitude_prune_global(state.D.weights, s_D_r))
            for network in (state.G, state.D):
                for param in network.params:
                    param.values = param.init_values * param.mask
            _reset_optimizer(state)
            trainer.log.debug(f"第 {r} 轮剪枝后 G 稀疏度 {sparsity_of(state.G.params):.4f}")
        state.initial_masks = {'G': state.G.masks(), 'D': state.D.masks()}
        trainer.run_phase(config.steps, 'final', explore=False)
    except NonFiniteError as e:
        return _finish(trainer, config, run_hash, started, True, str(e), False)
    return _finish(trainer, config, run_hash, started, False, None, True)


def resolve_method(config: TrainConfig) -> TrainConfig:
    """把 method 隐含的设置落实到配置中"""
    if config.method == 'static':
        return config.model_copy(update={'explore_target': 'none'})
    if config.method in ('dense', 'small_dense'):
        return config.model_copy(update={'s_G': 0.0, 's_D': 0.0, 'explore_target': 'none'})
    return config


def run_method(config: TrainConfig, probes: Optional[List[Probe]] = None,
               state: Optional[TrainingState] = None, stop_at: Optional[int] = None,
               on_checkpoint: Optional[Callable] = None) -> RunResult:
    """按 config.method 分派到对应的训练过程；结果以原始配置的哈希为键"""
    run_hash = config_hash(config)
    sampler = make_sampler(config.dataset.kind, config.dataset.sigma)
    resolved = resolve_method(config)
    full_spec = build_ganspec(config.arch)

    if config.method in ('pf_global', 'pf_uniform', 'ticket') and (state is not None or stop_at is not None):
        raise ContractError(f"{config.method} 不支持中断与恢复")
    if config.method == 'pf_global':
        result = run_pf(resolved, full_spec, sampler, 'global', probes=probes, run_hash=run_hash)
    elif config.method == 'pf_uniform':
        result = run_pf(resolved, full_spec, sampler, 'uniform', probes=probes, run_hash=run_hash)
    elif config.method == 'ticket':
        result = run_ticket(resolved, full_spec, sampler, probes=probes, run_hash=run_hash)
    elif config.method == 'small_dense':
        small_spec = build_ganspec(config.arch, width_mult=config.arch.width_mult)
        result = train(resolved, small_spec, sampler, probes, state, reference_spec=full_spec,
                       run_hash=run_hash, stop_at=stop_at, on_checkpoint=on_checkpoint)
    else:
        result = train(resolved, full_spec, sampler, probes, state, run_hash=run_hash,
                       stop_at=stop_at, on_checkpoint=on_checkpoint)
    result.config = config
    return result


def build_spec_for(config: TrainConfig) -> GanSpec:
    """config 实际训练的网络结构（small_dense 为缩窄后的网络）"""
    if config.method == 'small_dense':
        return build_ganspec(config.arch, width_mult=config.arch.width_mult)
    return build_ganspec(config.arch)
