"""运行配置模型（pydantic v2），规范化序列化与配置哈希"""
import hashlib
import itertools
import json
import math
import os
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from scripts.errors import ConfigError
from scripts.exploration import ExplorationOptions, ExplorationSchedule

SEED_ENV = 'SPARSE_EVOLVE_SEED'

Method = Literal['stu', 'static', 'dense', 'pf_global', 'pf_uniform', 'small_dense', 'ticket']
ExploreTarget = Literal['G', 'D', 'both', 'none']


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ExplorationScheduleConfig(_StrictModel):
    """参数探索计划；t_end 为空时取 floor(0.75·steps)"""
    delta_t: int = Field(default=100, ge=1)
    p0: float = Field(default=0.5, gt=0.0, lt=1.0)
    decay: Literal['cosine', 'constant'] = 'cosine'
    t_end: Optional[int] = Field(default=None, ge=0)


class ExplorationConfig(_StrictModel):
    scope: Literal['layer', 'global'] = 'layer'
    regrow: Literal['gradient', 'random'] = 'gradient'
    exclude_pruned: bool = False


class ArchitectureConfig(_StrictModel):
    kind: Literal['mlp', 'conv'] = 'mlp'
    d_z: int = Field(default=8, ge=1)
    g_hidden: List[int] = Field(default_factory=lambda: [128, 128])
    d_hidden: List[int] = Field(default_factory=lambda: [128, 128])
    conv_channels: int = Field(default=4, ge=1)
    conv_spatial: int = Field(default=4, ge=1)
    conv_kernel: int = Field(default=3, ge=1)
    g_activation: Literal['relu', 'leaky_relu', 'tanh', 'sigmoid', 'none'] = 'relu'
    g_output: Literal['relu', 'leaky_relu', 'tanh', 'sigmoid', 'none'] = 'none'
    d_activation: Literal['relu', 'leaky_relu', 'tanh', 'sigmoid', 'none'] = 'leaky_relu'
    d_slope: float = 0.2
    # small_dense 基线的隐藏层宽度倍数
    width_mult: float = Field(default=0.5, gt=0.0, le=1.0)


class DatasetConfig(_StrictModel):
    kind: Literal['ring8', 'grid25', 'checkerboard'] = 'ring8'
    sigma: Optional[float] = Field(default=None, gt=0.0)


class TrainConfig(_StrictModel):
    """单次训练运行的完整配置，config.json 就是它的规范化序列化"""
    method: Method = 'stu'
    s_G: float = Field(default=0.0, ge=0.0, lt=1.0)
    s_D: float = Field(default=0.0, ge=0.0, lt=1.0)
    allocation: Literal['uniform', 'er', 'erk'] = 'erk'
    steps: int = Field(default=2000, ge=1)
    batch: int = Field(default=64, ge=1)
    lr_G: float = Field(default=1e-3, gt=0.0)
    lr_D: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.0, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    d_steps: int = Field(default=1, ge=1)
    schedule: ExplorationScheduleConfig = Field(default_factory=ExplorationScheduleConfig)
    exploration: ExplorationConfig = Field(default_factory=ExplorationConfig)
    explore_target: ExploreTarget = 'G'
    seed: int = 0
    loss_mode: Literal['minimax', 'nonsaturating'] = 'nonsaturating'
    averaging: Literal['sema', 'ema', 'none'] = 'sema'
    ema_beta: float = Field(default=0.999, ge=0.0, lt=1.0)
    prune_target: Literal['G', 'G_and_D'] = 'G'
    finetune_steps: Optional[int] = Field(default=None, ge=1)
    ticket_rounds: int = Field(default=3, ge=1)
    arch: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    eval_interval: int = Field(default=500, ge=1)
    eval_samples: int = Field(default=2000, ge=1)
    n_projections: int = Field(default=64, ge=1)
    radius_mult: float = Field(default=3.0, gt=0.0)
    snapshot_masks: bool = True

    @model_validator(mode='after')
    def _check_schedule(self):
        if self.schedule.t_end is not None and self.schedule.t_end > self.steps:
            raise ValueError(f"schedule.t_end={self.schedule.t_end} 超过 steps={self.steps}")
        return self

    @property
    def t_end(self) -> int:
        if self.schedule.t_end is not None:
            return self.schedule.t_end
        return int(math.floor(0.75 * self.steps))

    @property
    def total_finetune_steps(self) -> int:
        return self.steps if self.finetune_steps is None else self.finetune_steps

    def exploration_schedule(self) -> ExplorationSchedule:
        return ExplorationSchedule(self.schedule.delta_t, self.schedule.p0, self.schedule.decay, self.t_end)

    def exploration_options(self) -> ExplorationOptions:
        return ExplorationOptions(self.exploration.scope, self.exploration.regrow, self.exploration.exclude_pruned)

    def explores(self, network: str) -> bool:
        return self.explore_target in (network, 'both')


class SweepSpec(_StrictModel):
    """(s_G, s_D, method, explore_target, ΔT, 步数倍数, seed) 网格；未给出的轴沿用 base"""
    name: str = 'sweep'
    base: TrainConfig = Field(default_factory=TrainConfig)
    s_G: Optional[List[float]] = None
    s_D: Optional[List[float]] = None
    methods: Optional[List[Method]] = None
    explore_targets: Optional[List[ExploreTarget]] = None
    delta_ts: Optional[List[int]] = None
    steps_mults: Optional[List[int]] = None
    seeds: List[int] = Field(default_factory=lambda: [0])

    @model_validator(mode='after')
    def _check_grid(self):
        for axis in ('s_G', 's_D', 'methods', 'explore_targets', 'delta_ts', 'steps_mults', 'seeds'):
            values = getattr(self, axis)
            if values is not None and len(values) == 0:
                raise ValueError(f"网格轴 {axis} 不能为空列表")
        self.expand()
        return self

    def axes(self) -> Dict[str, list]:
        base = self.base
        return {
            's_G': self.s_G or [base.s_G],
            's_D': self.s_D or [base.s_D],
            'method': self.methods or [base.method],
            'explore_target': self.explore_targets or [base.explore_target],
            'delta_t': self.delta_ts or [base.schedule.delta_t],
            'steps_mult': self.steps_mults or [1],
            'seed': self.seeds,
        }

    def expand(self) -> List[Dict[str, Any]]:
        """展开网格，每个单元返回 {'cell': 网格坐标, 'config': TrainConfig}"""
        axes = self.axes()
        names = list(axes)
        cells = []
        for combo in itertools.product(*(axes[name] for name in names)):
            cell = dict(zip(names, combo))
            data = self.base.model_dump(mode='json')
            data.update(s_G=cell['s_G'], s_D=cell['s_D'], method=cell['method'],
                        explore_target=cell['explore_target'], seed=cell['seed'])
            data['schedule']['delta_t'] = cell['delta_t']
            data['steps'] = self.base.steps * cell['steps_mult']
            if data['schedule']['t_end'] is not None:
                data['schedule']['t_end'] = data['schedule']['t_end'] * cell['steps_mult']
            cells.append({'cell': cell, 'config': TrainConfig.model_validate(data)})
        return cells


def canonical_json(config: BaseModel) -> str:
    return json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))


def config_hash(config: BaseModel) -> str:
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()[:16]


def format_validation_error(error: ValidationError) -> str:
    """把 pydantic 的校验错误整理成「字段: 原因」的形式"""
    parts = []
    for item in error.errors():
        location = '.'.join(str(part) for part in item['loc']) or '<root>'
        if item['type'] == 'extra_forbidden':
            parts.append(f"未知字段 {location}")
        else:
            parts.append(f"字段 {location}: {item['msg']}")
    return '; '.join(parts)


def validate_train_config(data: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def validate_sweep_spec(data: Dict[str, Any]) -> SweepSpec:
    try:
        return SweepSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def parse_override(text: str):
    """解析 key=value，value 按 YAML 语法推断类型"""
    if '=' not in text:
        raise ConfigError(f"覆盖项格式应为 key=value: {text}")
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"覆盖项缺少字段名: {text}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"无法解析覆盖值 {text}: {e}") from e
    return key, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """按点分路径覆盖配置字段，路径必须是 TrainConfig 中已有的字段"""
    if not overrides:
        return data
    full = validate_train_config(data).model_dump(mode='json')
    for text in overrides:
        key, value = parse_override(text)
        node = full
        parts = key.split('.')
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"未知字段 {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"未知字段 {key}")
        node[parts[-1]] = value
        logger.debug(f"配置覆盖 {key}={value!r}")
    return full


def read_json(path: str) -> Dict[str, Any]:
    """读取 JSON 配置文件；文件不存在等 IO 错误原样抛出"""
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件不是合法的 JSON: {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是对象: {path}")
    return data


def build_train_config(data: Dict[str, Any], overrides: Sequence[str] = (),
                       seed: Optional[int] = None) -> TrainConfig:
    """配置字典 + --set 覆盖 + 环境变量 SPARSE_EVOLVE_SEED + 显式 seed（优先级依次升高）"""
    data = apply_overrides(dict(data), overrides)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and env_seed.strip():
        try:
            data['seed'] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"环境变量 {SEED_ENV} 必须是整数: {env_seed}") from e
    if seed is not None:
        data['seed'] = seed
    return validate_train_config(data)


def load_train_config(path: str, overrides: Sequence[str] = (), seed: Optional[int] = None) -> TrainConfig:
    return build_train_config(read_json(path), overrides, seed)


def load_sweep_spec(path: str) -> SweepSpec:
    return validate_sweep_spec(read_json(path))
