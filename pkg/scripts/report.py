"""由 results.csv 生成汇总表与 SVG 折线图（coverage / w1 随 s_G 变化，每个 s_D 一条线）"""
import json
import os
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader
from loguru import logger

from scripts.errors import ContractError, MissingColumnsError
from scripts.utils import get_config_path

REQUIRED_COLUMNS = ['method', 's_G', 's_D', 'seed', 'coverage', 'w1', 'diverged']
SUMMARY_KEYS = ['method', 's_G', 's_D', 'explore_target', 'delta_t', 'steps_mult']
SUMMARY_METRICS = ['coverage', 'hq_ratio', 'w1', 'itop_rate', 'train_flops_ratio', 'train_flops_ratio_g',
                   'test_flops_ratio']
PALETTE = ['#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd', '#8c564b', '#e377c2', '#7f7f7f']
TEMPLATE_NAME = 'line_plot.svg.j2'

WIDTH, HEIGHT = 640, 400
PLOT = {'left': 70, 'right': 520, 'top': 40, 'bottom': 350}


def load_results_csv(path: str) -> pd.DataFrame:
    """读取结果文件；空文件或缺列都是错误"""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise ContractError(f"结果文件为空: {path}") from e
    missing = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
    if missing:
        raise MissingColumnsError(missing)
    if frame.empty:
        raise ContractError(f"结果文件没有任何数据行: {path}")
    frame['diverged'] = frame['diverged'].astype(str).str.lower().isin(['true', '1'])
    return frame


def _usable(frame: pd.DataFrame) -> pd.DataFrame:
    if 'status' in frame.columns:
        return frame[frame['status'] == 'ok']
    return frame[~frame['diverged']]


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """每个配置（不含 seed）的 mean/std 与运行数"""
    keys = [key for key in SUMMARY_KEYS if key in frame.columns]
    metrics = [metric for metric in SUMMARY_METRICS if metric in frame.columns]
    records = []
    for group_keys, group in frame.groupby(keys, sort=True, dropna=False):
        group_keys = group_keys if isinstance(group_keys, tuple) else (group_keys,)
        record = dict(zip(keys, group_keys))
        usable = _usable(group)
        record['n_runs'] = int(len(group))
        record['n_diverged'] = int(group['diverged'].sum())
        for metric in metrics:
            values = pd.to_numeric(usable[metric], errors='coerce').dropna().to_numpy(dtype=np.float64)
            record[f"{metric}_mean"] = float(np.mean(values)) if values.size else np.nan
            record[f"{metric}_std"] = float(np.std(values)) if values.size else np.nan
        records.append(record)
    return pd.DataFrame(records)


def _ticks(lo: float, hi: float, to_pixel, n: int = 5) -> List[dict]:
    return [{'pos': f"{to_pixel(v):.2f}", 'label': f"{v:.2f}"} for v in np.linspace(lo, hi, n)]


def _axis_range(values: Sequence[float], floor_zero: bool) -> Tuple[float, float]:
    lo, hi = float(min(values)), float(max(values))
    if floor_zero:
        lo = min(0.0, lo)
    if hi - lo < 1e-12:
        pad = 0.05 if hi == 0 else abs(hi) * 0.05
        lo, hi = lo - pad, hi + pad
    return lo, hi


def render_line_plot(series: Dict[str, List[Tuple[float, float]]], title: str, x_label: str,
                     y_label: str, y_range: Tuple[float, float] = None) -> str:
    """把 {标签: [(x, y), ...]} 渲染为 SVG 字符串；相同输入得到相同字节"""
    points = [p for values in series.values() for p in values]
    if not points:
        raise ContractError(f"{title}: 没有可绘制的数据点")
    x_lo, x_hi = _axis_range([p[0] for p in points], floor_zero=False)
    y_lo, y_hi = y_range or _axis_range([p[1] for p in points], floor_zero=True)

    def to_x(v):
        return PLOT['left'] + (v - x_lo) / (x_hi - x_lo) * (PLOT['right'] - PLOT['left'])

    def to_y(v):
        return PLOT['bottom'] - (v - y_lo) / (y_hi - y_lo) * (PLOT['bottom'] - PLOT['top'])

    rendered_series = []
    for index, (label, values) in enumerate(series.items()):
        rendered_series.append({
            'label': label,
            'color': PALETTE[index % len(PALETTE)],
            'points': [{'x': f"{to_x(x):.2f}", 'y': f"{to_y(y):.2f}"} for x, y in sorted(values)],
        })

    env = Environment(loader=FileSystemLoader(get_config_path('templates')), autoescape=True,
                      keep_trailing_newline=True)
    template = env.get_template(TEMPLATE_NAME)
    return template.render(width=WIDTH, height=HEIGHT, plot=PLOT, title=title, x_label=x_label,
                           y_label=y_label, series=rendered_series,
                           x_ticks=_ticks(x_lo, x_hi, to_x), y_ticks=_ticks(y_lo, y_hi, to_y))


def metric_series(frame: pd.DataFrame, metric: str) -> Dict[str, List[Tuple[float, float]]]:
    """按 s_D 分组的 (s_G, seed 平均值) 序列"""
    usable = _usable(frame)
    series = {}
    for s_d, group in usable.groupby('s_D', sort=True):
        means = (group.assign(_value=pd.to_numeric(group[metric], errors='coerce'))
                 .dropna(subset=['_value']).groupby('s_G', sort=True)['_value'].mean())
        if len(means):
            series[f"s_D={float(s_d):.2f}"] = [(float(x), float(y)) for x, y in means.items()]
    return series


def generate_report(results_csv: str, output_dir: str) -> Dict[str, str]:
    """写出 summary.csv、summary.json 以及每个 method 的 coverage/w1 折线图

    Returns:
        生成的文件名到路径的映射
    """
    frame = load_results_csv(results_csv)
    os.makedirs(output_dir, exist_ok=True)
    outputs = {}

    summary = summarize(frame)
    summary_csv = os.path.join(output_dir, 'summary.csv')
    summary.to_csv(summary_csv, index=False)
    outputs['summary.csv'] = summary_csv
    summary_json = os.path.join(output_dir, 'summary.json')
    with open(summary_json, 'w', encoding='utf-8') as f:
        json.dump(json.loads(summary.to_json(orient='records')), f, indent=2, ensure_ascii=False)
    outputs['summary.json'] = summary_json

    for method, group in frame.groupby('method', sort=True):
        for metric, y_label, y_range in (('coverage', 'mode coverage', (0.0, 1.0)), ('w1', 'sliced W1', None)):
            series = metric_series(group, metric)
            if not series:
                logger.warning(f"警告: {method} 没有可用于 {metric} 的数据行，跳过绘图")
                continue
            svg = render_line_plot(series, f"{method}: {metric} vs s_G", 's_G', y_label, y_range)
            name = f"{metric}_{method}.svg"
            path = os.path.join(output_dir, name)
            with open(path, 'w', encoding='utf-8', newline='\n') as f:
                f.write(svg)
            outputs[name] = path

    logger.info(f"已生成报告: {len(outputs)} 个文件 -> {output_dir}")
    return outputs
