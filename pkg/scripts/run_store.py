"""运行目录的读写

目录结构:
    config.json      规范化的运行配置，单独即可复现整个运行
    metrics.csv      step, d_loss, g_loss, coverage, hq_ratio, w1, itop_rate, flops_cum
    masks/           掩码快照 step_XXXXXXX.sevm（生成器与判别器各层）
    events.log       每次参数探索一行
    summary.json     最终指标、稀疏度、FLOPs 账本
    checkpoint.npz / checkpoint.json   恢复训练所需的全部状态
"""
import json
import os
from dataclasses import asdict
from typing import Optional

import numpy as np
import pandas as pd
from loguru import logger

from scripts.datasets import make_sampler
from scripts.errors import ContractError
from scripts.exploration import ExplorationEvent, ItopTracker
from scripts.flops import FlopsLedger
from scripts.gan_train import (METRIC_COLUMNS, GanTrainer, RunResult, TrainingState, build_spec_for,
                               init_state, resolve_method, run_method)
from scripts.mask_io import save_masks
from scripts.networks import build_ganspec
from scripts.quality_metrics import MetricsReport
from scripts.run_config import TrainConfig, canonical_json, read_json, validate_train_config

CHECKPOINT_ARRAYS = 'checkpoint.npz'
CHECKPOINT_META = 'checkpoint.json'
KEY_SEP = '::'


def _write_text(path: str, text: str):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', encoding='utf-8') as f:
        f.write(text)
    os.replace(tmp_path, path)


def write_json(path: str, data: dict):
    _write_text(path, json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True))


def metrics_frame(result: RunResult) -> pd.DataFrame:
    return pd.DataFrame(result.metrics, columns=METRIC_COLUMNS)


def save_run(result: RunResult, run_dir: str) -> str:
    """把一次运行写入 run_dir；已存在的掩码快照不会被删除"""
    os.makedirs(os.path.join(run_dir, 'masks'), exist_ok=True)
    _write_text(os.path.join(run_dir, 'config.json'), canonical_json(result.config))
    metrics_frame(result).to_csv(os.path.join(run_dir, 'metrics.csv'), index=False)

    state = result.state
    names = state.G.spec.layer_names + state.D.spec.layer_names
    for step, snapshot in sorted(state.mask_snapshots.items()):
        save_masks(os.path.join(run_dir, 'masks', f"step_{step:07d}.sevm"),
                   snapshot['G'] + snapshot['D'], names)

    _write_text(os.path.join(run_dir, 'events.log'),
                ''.join(f"{event.to_line()}\n" for event in result.events))
    write_json(os.path.join(run_dir, 'summary.json'), result.summary())
    save_checkpoint(state, run_dir)
    logger.info(f"已保存运行目录: {run_dir}")
    return run_dir


def save_checkpoint(state: TrainingState, run_dir: str):
    arrays = {}
    for network in (state.G, state.D):
        for param in network.params:
            for key, value in param.state_arrays().items():
                arrays[f"param{KEY_SEP}{param.name}{KEY_SEP}{key}"] = value
    for net_name, tracker in (('G', state.tracker_G), ('D', state.tracker_D)):
        for name, ever in tracker.ever_active.items():
            arrays[f"itop{KEY_SEP}{net_name}{KEY_SEP}{name}"] = ever
    for net_name, masks in state.initial_masks.items():
        for index, mask in enumerate(masks):
            arrays[f"initial_mask{KEY_SEP}{net_name}{KEY_SEP}{index}"] = mask

    os.makedirs(run_dir, exist_ok=True)
    tmp_path = os.path.join(run_dir, 'checkpoint.tmp.npz')
    np.savez_compressed(tmp_path, **arrays)
    os.replace(tmp_path, os.path.join(run_dir, CHECKPOINT_ARRAYS))

    meta = {
        'step': state.step,
        'd_updates': state.d_updates,
        'g_updates': state.g_updates,
        'ledger': state.ledger.to_dict(),
        'rngs': {name: rng.bit_generator.state for name, rng in state.rngs.items()},
        'metrics': state.metrics,
        'events': [asdict(event) for event in state.events],
    }
    write_json(os.path.join(run_dir, CHECKPOINT_META), meta)
    logger.debug(f"检查点已写入 {run_dir} (step={state.step})")


def load_run_config(run_dir: str) -> TrainConfig:
    return validate_train_config(read_json(os.path.join(run_dir, 'config.json')))


def load_checkpoint(run_dir: str, config: Optional[TrainConfig] = None) -> TrainingState:
    """从 run_dir 恢复 TrainingState，之后的训练与未中断的运行逐位一致"""
    config = config or load_run_config(run_dir)
    arrays_path = os.path.join(run_dir, CHECKPOINT_ARRAYS)
    meta_path = os.path.join(run_dir, CHECKPOINT_META)
    if not os.path.exists(arrays_path) or not os.path.exists(meta_path):
        raise FileNotFoundError(f"运行目录中没有检查点: {run_dir}")

    resolved = resolve_method(config)
    reference_spec = build_ganspec(config.arch) if config.method == 'small_dense' else None
    state = init_state(resolved, build_spec_for(config), reference_spec)

    with np.load(arrays_path) as data:
        grouped = {}
        for key in data.files:
            kind, owner, item = key.split(KEY_SEP)
            grouped.setdefault(kind, {}).setdefault(owner, {})[item] = data[key]

    for network in (state.G, state.D):
        for param in network.params:
            if param.name not in grouped.get('param', {}):
                raise ContractError(f"检查点缺少参数 {param.name}")
            param.load_state_arrays(grouped['param'][param.name])
            param.zero_grad()
    state.tracker_G = ItopTracker({k: v.astype(bool) for k, v in grouped.get('itop', {}).get('G', {}).items()})
    state.tracker_D = ItopTracker({k: v.astype(bool) for k, v in grouped.get('itop', {}).get('D', {}).items()})
    initial = grouped.get('initial_mask', {})
    state.initial_masks = {
        net_name: [initial[net_name][str(i)] for i in range(len(initial.get(net_name, {})))]
        for net_name in ('G', 'D')
    }

    with open(meta_path, 'r', encoding='utf-8') as f:
        meta = json.load(f)
    state.step = meta['step']
    state.d_updates = meta['d_updates']
    state.g_updates = meta['g_updates']
    state.ledger = FlopsLedger.from_dict(meta['ledger'])
    for name, rng_state in meta['rngs'].items():
        state.rngs[name].bit_generator.state = rng_state
    state.metrics = meta['metrics']
    state.events = [ExplorationEvent(**event) for event in meta['events']]
    state.mask_snapshots = {}
    return state


def load_metrics(run_dir: str) -> pd.DataFrame:
    return pd.read_csv(os.path.join(run_dir, 'metrics.csv'))


def load_summary(run_dir: str) -> dict:
    with open(os.path.join(run_dir, 'summary.json'), 'r', encoding='utf-8') as f:
        return json.load(f)


def execute_run(config: TrainConfig, run_dir: str, resume: bool = False,
                stop_at: Optional[int] = None) -> RunResult:
    """训练并写出运行目录；每次评估后都会刷新检查点"""
    state = load_checkpoint(run_dir, config) if resume else None
    if state is not None:
        logger.info(f"正在从第 {state.step} 步恢复运行 {run_dir}")
    result = run_method(config, state=state, stop_at=stop_at,
                        on_checkpoint=lambda s: save_checkpoint(s, run_dir))
    save_run(result, run_dir)
    return result


def evaluate_run(run_dir: str, n_samples: Optional[int] = None) -> MetricsReport:
    """重新载入检查点，对平均后的生成器采样并写出 eval.json"""
    config = load_run_config(run_dir)
    if n_samples is not None:
        config = config.model_copy(update={'eval_samples': n_samples})
    state = load_checkpoint(run_dir, config)
    trainer = GanTrainer(resolve_method(config), build_spec_for(config),
                         make_sampler(config.dataset.kind, config.dataset.sigma), state)
    report = trainer.evaluate()
    write_json(os.path.join(run_dir, 'eval.json'), {'step': state.step, **report.to_dict()})
    logger.info(f"已完成评估: coverage={report.mode_coverage:.3f} hq={report.hq_ratio:.3f} w1={report.w1:.4f}")
    return report
