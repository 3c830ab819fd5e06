"""(s_G, s_D) 等网格扫描：并行运行、按配置哈希断点续跑、汇总 mean±std"""
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from scripts.run_config import SweepSpec, TrainConfig, config_hash
from scripts.run_store import execute_run
from scripts.system_resource_check import recommend_jobs

GROUP_COLUMNS = ['method', 's_G', 's_D', 'explore_target', 'delta_t', 'steps_mult']

RESULT_COLUMNS = ['config_hash', *GROUP_COLUMNS, 'seed', 'status', 'diverged', 'failure', 'steps_completed',
                  'coverage', 'hq_ratio', 'w1', 'itop_rate', 'train_flops_ratio', 'train_flops_ratio_g',
                  'test_flops_ratio', 'final_sparsity_G', 'final_sparsity_D', 'wall_time']

AGGREGATE_METRICS = ['coverage', 'hq_ratio', 'w1', 'itop_rate', 'train_flops_ratio', 'train_flops_ratio_g',
                     'test_flops_ratio']

# 已完成的行在续跑时跳过；error 行会重新运行
FINISHED_STATUSES = ('ok', 'diverged')


def _base_row(run_hash: str, cell: dict) -> dict:
    row = {column: None for column in RESULT_COLUMNS}
    row.update(config_hash=run_hash, method=cell['method'], s_G=cell['s_G'], s_D=cell['s_D'],
               explore_target=cell['explore_target'], delta_t=cell['delta_t'],
               steps_mult=cell['steps_mult'], seed=cell['seed'])
    return row


def run_cell(config_data: dict, cell: dict, run_dir: str) -> dict:
    """运行一个网格单元并返回 results.csv 的一行；异常记录在行内而不是向上抛出"""
    config = TrainConfig.model_validate(config_data)
    run_hash = config_hash(config)
    row = _base_row(run_hash, cell)
    try:
        result = execute_run(config, run_dir)
    except Exception as e:
        logger.error(f"错误: 运行 {run_hash} 失败: {e}")
        row.update(status='error', diverged=False, failure=f"{type(e).__name__}: {e}")
        return row

    summary = result.summary()
    flops = summary['flops']
    row.update(
        status='diverged' if result.diverged else 'ok',
        diverged=result.diverged,
        failure=result.failure,
        steps_completed=summary['steps_completed'],
        coverage=summary['mode_coverage'],
        hq_ratio=summary['hq_ratio'],
        w1=summary['w1'],
        itop_rate=summary['itop_rate_G'],
        train_flops_ratio=flops['train_ratio'],
        train_flops_ratio_g=flops['train_ratio_g'],
        test_flops_ratio=flops['test_ratio'],
        final_sparsity_G=summary['final_sparsity_G'],
        final_sparsity_D=summary['final_sparsity_D'],
        wall_time=summary['wall_time'],
    )
    return row


def _sorted_frame(rows: List[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    if frame.empty:
        return frame
    return frame.sort_values([*GROUP_COLUMNS, 'seed', 'config_hash'], kind='mergesort').reset_index(drop=True)


def load_results(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        return pd.DataFrame(columns=RESULT_COLUMNS)
    return pd.read_csv(path)


def aggregate(frame: pd.DataFrame) -> pd.DataFrame:
    """按配置（不含 seed）分组的 mean±std；发散与失败的行只计入 diverged_rate 与 n_failed"""
    if frame.empty:
        return pd.DataFrame()
    frame = frame.copy()
    frame['diverged'] = frame['diverged'].astype(str).str.lower().isin(['true', '1'])
    records = []
    for keys, group in frame.groupby(GROUP_COLUMNS, sort=True, dropna=False):
        record = dict(zip(GROUP_COLUMNS, keys))
        ok = group[group['status'] == 'ok']
        record['n_runs'] = int(len(group))
        record['n_failed'] = int((group['status'] == 'error').sum())
        record['diverged_rate'] = float(group['diverged'].mean())
        for metric in AGGREGATE_METRICS:
            values = pd.to_numeric(ok[metric], errors='coerce').dropna().to_numpy(dtype=np.float64)
            record[f"{metric}_mean"] = float(np.mean(values)) if values.size else np.nan
            record[f"{metric}_std"] = float(np.std(values)) if values.size else np.nan
        records.append(record)
    return pd.DataFrame(records)


def run_sweep(spec: SweepSpec, output_dir: str, jobs: Optional[int] = None,
              show_progress: bool = True) -> pd.DataFrame:
    """运行整个网格，写出 output_dir/results.csv、aggregate.csv 以及每个运行的 runs/<hash>/

    已在 results.csv 中完成（ok 或 diverged）的行按配置哈希跳过。
    """
    os.makedirs(os.path.join(output_dir, 'runs'), exist_ok=True)
    results_path = os.path.join(output_dir, 'results.csv')
    existing = load_results(results_path)
    finished: Dict[str, dict] = {}
    for record in existing.to_dict('records'):
        if record.get('status') in FINISHED_STATUSES:
            finished[record['config_hash']] = record

    cells = spec.expand()
    rows: Dict[str, dict] = {}
    pending = []
    for item in cells:
        run_hash = config_hash(item['config'])
        if run_hash in finished:
            rows[run_hash] = finished[run_hash]
        else:
            pending.append((run_hash, item))
    logger.info(f"=== 扫描 {spec.name}: 共 {len(cells)} 个运行, 已完成 {len(rows)}, 待运行 {len(pending)} ===")

    def _record(row: dict):
        rows[row['config_hash']] = row
        _sorted_frame(list(rows.values())).to_csv(results_path, index=False)

    if pending:
        jobs = jobs or recommend_jobs(len(pending))
        progress = tqdm(total=len(pending), desc=spec.name, disable=not show_progress)
        payloads = [(item['config'].model_dump(mode='json'), item['cell'],
                     os.path.join(output_dir, 'runs', run_hash)) for run_hash, item in pending]
        if jobs <= 1:
            for payload in payloads:
                _record(run_cell(*payload))
                progress.update(1)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as executor:
                futures = [executor.submit(run_cell, *payload) for payload in payloads]
                for future in as_completed(futures):
                    _record(future.result())
                    progress.update(1)
        progress.close()

    frame = _sorted_frame(list(rows.values()))
    frame.to_csv(results_path, index=False)
    aggregate(frame).to_csv(os.path.join(output_dir, 'aggregate.csv'), index=False)
    n_error = int((frame['status'] == 'error').sum()) if not frame.empty else 0
    logger.info(f"已完成扫描 {spec.name}: {len(frame)} 行, 失败 {n_error} 行, 结果: {results_path}")
    return frame
