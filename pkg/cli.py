"""sparse-evolve 命令行入口

子命令: train / sweep / report / flops / eval
退出码: 0 成功, 2 配置错误, 3 训练发散, 4 读写错误
"""
import argparse
import os
import sys
from typing import List, Optional

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from scripts.errors import ConfigError, DimensionError, DomainError, SparseEvolveError
from scripts.flops import flops_table
from scripts.report import generate_report
from scripts.run_config import config_hash, format_validation_error, load_sweep_spec, load_train_config
from scripts.run_store import evaluate_run, execute_run, load_run_config
from scripts.sweep import run_sweep
from scripts.utils import get_output_path, load_config, setup_logging

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _harness_section(name: str) -> dict:
    """config.yaml 中的某一段；配置文件缺失时返回空字典"""
    try:
        return load_config().get(name) or {}
    except ConfigError:
        return {}


def cmd_train(args) -> int:
    if args.resume:
        config = load_run_config(args.resume)
        run_dir = args.resume
    else:
        config = load_train_config(args.config, args.set or [], args.seed)
        run_dir = args.output or os.path.dirname(get_output_path('runs', config_hash(config), 'config.json'))
    print(f"=== 训练 {config.method}: s_G={config.s_G} s_D={config.s_D} seed={config.seed} ===")
    result = execute_run(config, run_dir, resume=bool(args.resume), stop_at=args.stop_at)
    print(f"运行目录: {run_dir}")
    if result.diverged:
        print(f"错误: 训练在第 {result.state.step + 1} 步发散: {result.failure}")
        return EXIT_DIVERGED
    if result.final is not None:
        final = result.final
        print(f"coverage={final.mode_coverage:.4f} hq_ratio={final.hq_ratio:.4f} w1={final.w1:.6f} "
              f"train_flops={result.ledger.train_ratio:.4f}x test_flops={result.ledger.test_ratio:.4f}x")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = load_sweep_spec(args.spec)
    jobs = args.jobs or _harness_section('sweep').get('default_jobs')
    output_dir = args.output or os.path.dirname(get_output_path('sweeps', spec.name, 'results.csv'))
    frame = run_sweep(spec, output_dir, jobs=jobs, show_progress=not args.quiet)
    n_error = int((frame['status'] == 'error').sum()) if not frame.empty else 0
    n_diverged = int((frame['status'] == 'diverged').sum()) if not frame.empty else 0
    print(f"=== 扫描完成: {len(frame)} 行, 发散 {n_diverged}, 失败 {n_error} ===")
    print(f"结果文件: {os.path.join(output_dir, 'results.csv')}")
    return EXIT_OK


def cmd_report(args) -> int:
    output_dir = args.output or os.path.join(os.path.dirname(os.path.abspath(args.results)), 'report')
    outputs = generate_report(args.results, output_dir)
    for name, path in outputs.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_flops(args) -> int:
    config = load_train_config(args.config, args.set or [])
    rows = flops_table(config, args.methods, args.s_G, args.s_D)
    frame = pd.DataFrame(rows)
    print("=== 训练/测试 FLOPs（相对稠密 GAN）===")
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if args.output:
        os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
        frame.to_csv(args.output, index=False)
        print(f"已写入 {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = args.samples or _harness_section('evaluation').get('eval_samples')
    report = evaluate_run(args.run, samples)
    print(f"coverage={report.mode_coverage:.4f} hq_ratio={report.hq_ratio:.4f} w1={report.w1:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='sparse-evolve', description='稀疏 GAN 训练与对比实验工具')
    parser.add_argument('--log-level', default=None, help='控制台日志级别')
    subparsers = parser.add_subparsers(dest='command', required=True)

    train_parser = subparsers.add_parser('train', help='运行一次训练')
    source = train_parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--config', help='运行配置 JSON 文件')
    source.add_argument('--resume', help='从已有运行目录的检查点继续训练')
    train_parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='覆盖配置字段，可重复')
    train_parser.add_argument('--seed', type=int, default=None, help='覆盖随机种子')
    train_parser.add_argument('--output', help='运行目录，默认 output/runs/<配置哈希>')
    train_parser.add_argument('--stop-at', type=int, default=None, help='训练到该步数后停止（之后可 --resume）')
    train_parser.set_defaults(func=cmd_train)

    sweep_parser = subparsers.add_parser('sweep', help='运行网格扫描')
    sweep_parser.add_argument('spec', help='扫描配置 JSON 文件')
    sweep_parser.add_argument('--output', help='输出目录，默认 output/sweeps/<name>')
    sweep_parser.add_argument('--jobs', type=int, default=None, help='并行进程数，默认按系统资源推荐')
    sweep_parser.add_argument('--quiet', action='store_true', help='不显示进度条')
    sweep_parser.set_defaults(func=cmd_sweep)

    report_parser = subparsers.add_parser('report', help='由 results.csv 生成汇总表和 SVG 图')
    report_parser.add_argument('results', help='results.csv 路径')
    report_parser.add_argument('--output', help='输出目录，默认与 results.csv 同级的 report/')
    report_parser.set_defaults(func=cmd_report)

    flops_parser = subparsers.add_parser('flops', help='打印各方法的 FLOPs 比值表')
    flops_parser.add_argument('--config', required=True, help='运行配置 JSON 文件（提供网络结构与批大小）')
    flops_parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='覆盖配置字段，可重复')
    flops_parser.add_argument('--methods', nargs='+',
                              default=['dense', 'static', 'stu', 'pf_uniform', 'small_dense', 'ticket'])
    flops_parser.add_argument('--s-G', dest='s_G', type=float, nargs='+', default=[0.8, 0.9, 0.95])
    flops_parser.add_argument('--s-D', dest='s_D', type=float, nargs='+', default=[0.5])
    flops_parser.add_argument('--output', help='同时写出 CSV')
    flops_parser.set_defaults(func=cmd_flops)

    eval_parser = subparsers.add_parser('eval', help='重新评估已有运行的最终生成器')
    eval_parser.add_argument('--run', required=True, help='运行目录')
    eval_parser.add_argument('--samples', type=int, default=None, help='评估样本数')
    eval_parser.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(console_level=args.log_level)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"错误: 配置无效: {format_validation_error(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DomainError, DimensionError) as e:
        print(f"错误: 配置无效: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"错误: 读写失败: {e}", file=sys.stderr)
        return EXIT_IO
    except SparseEvolveError as e:
        logger.exception(f"错误: {e}")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
