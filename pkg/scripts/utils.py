import logging
import os
import sys
from datetime import datetime
from typing import Dict, Any

import yaml
from loguru import logger

from scripts.errors import ConfigError

# config.yaml 中必须存在的配置段
REQUIRED_SECTIONS = ['output', 'logging', 'evaluation', 'server', 'sweep']


def get_base_path() -> str:
    """获取项目基础路径"""
    if getattr(sys, 'frozen', False):
        return os.path.dirname(sys.executable)
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def get_config_path(config_file: str) -> str:
    """
    获取配置文件路径
    Args:
        config_file: 配置文件名（可带子目录，如 templates/line_plot.svg.j2）
    Returns:
        配置文件的完整路径
    """
    return os.path.join(get_base_path(), 'config', config_file)


def load_config() -> Dict[str, Any]:
    """加载 config.yaml 并验证必需的配置段"""
    config_path = os.environ.get('SPARSE_EVOLVE_CONFIG') or get_config_path('config.yaml')
    if not os.path.exists(config_path):
        logger.debug(f"当前基础路径: {get_base_path()}")
        raise ConfigError(f"配置文件不存在: {config_path}")

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件解析失败: {config_path}: {e}") from e

    missing = [section for section in REQUIRED_SECTIONS if section not in config]
    if missing:
        raise ConfigError(f"配置文件缺少必要字段: {', '.join(missing)}")
    return config


def get_output_root() -> str:
    """输出根目录：环境变量 SPARSE_EVOLVE_OUTPUT > config.yaml 的 output.root > output/"""
    env_root = os.environ.get('SPARSE_EVOLVE_OUTPUT')
    if env_root:
        return env_root
    try:
        root = load_config().get('output', {}).get('root') or 'output'
    except ConfigError:
        root = 'output'
    return root if os.path.isabs(root) else os.path.join(get_base_path(), root)


def get_output_path(*paths: str) -> str:
    """
    获取输出文件路径，并确保父目录存在
    Args:
        *paths: 路径片段
    Returns:
        完整的输出路径
    """
    output_root = get_output_root()
    os.makedirs(output_root, exist_ok=True)

    full_path = os.path.join(output_root, *paths)
    os.makedirs(os.path.dirname(full_path), exist_ok=True)
    return full_path


def get_logs_path() -> str:
    """获取当天日志文件路径 output/logs/年/月/日.log"""
    current_time = datetime.now()
    return get_output_path(
        'logs',
        str(current_time.year),
        f"{current_time.month:02d}",
        f"{current_time.day:02d}.log"
    )


class InterceptHandler(logging.Handler):
    """把标准库 logging（uvicorn 等）转发到 loguru"""

    def emit(self, record):
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = logging.currentframe(), 2
        while frame and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(level, record.getMessage())


def setup_logging(console_level: str = None, file_logging: bool = True) -> Dict[str, str]:
    """设置 Loguru 日志系统

    Args:
        console_level: 控制台日志级别，默认读取 config.yaml 的 logging.console_level
        file_logging: 是否写入按日期划分的日志文件
    Returns:
        日志文件路径信息
    """
    try:
        log_config = load_config().get('logging', {})
    except ConfigError:
        log_config = {}
    console_level = console_level or log_config.get('console_level', 'INFO')

    logger.remove()
    logger.configure(extra={"app_name": "SparseEvolve", "version": "0.1.0", "run": "-"})

    # 控制台只输出带特定前缀的信息，保持命令行简洁
    logger.add(
        sys.stderr,
        level=console_level,
        format="<green>{message}</green>",
        filter=lambda record: (
            isinstance(record["message"], str) and
            record["message"].startswith(("===", "正在", "已", "成功", "错误:", "警告:"))
        ),
        diagnose=False
    )

    info = {}
    if file_logging:
        main_log_file = get_logs_path()
        error_log_file = os.path.join(os.path.dirname(main_log_file),
                                      f"error_{os.path.basename(main_log_file)}")
        logger.add(
            main_log_file,
            level=log_config.get('file_level', 'INFO'),
            format="[{time:YYYY-MM-DD HH:mm:ss}] [{level}] [{extra[app_name]}] [v{extra[version]}] "
                   "[进程:{process}] [run:{extra[run]}] [{name}] [{file.name}:{line}] [{function}] {message}\n{exception}",
            encoding="utf-8",
            enqueue=True,
            diagnose=False,
            backtrace=False,
            rotation="00:00",
            retention=log_config.get('retention', '30 days'),
            compression="zip"
        )
        logger.add(
            error_log_file,
            level="ERROR",
            format="[{time:YYYY-MM-DD HH:mm:ss}] [{level}] [{extra[app_name]}] [{name}] [{file.name}:{line}] [{function}] {message}\n{exception}",
            encoding="utf-8",
            enqueue=True,
            diagnose=False,
            backtrace=False,
            rotation="00:00",
            retention=log_config.get('retention', '30 days'),
            compression="zip"
        )
        info = {"main_log_file": main_log_file, "error_log_file": error_log_file}

    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)
    return info
