import platform
from typing import Optional

import psutil
from loguru import logger

# 每个并行训练任务预留的内存（GB）
MEMORY_PER_JOB_GB = 0.5
# 留给系统和主进程的内存（GB）
RESERVED_MEMORY_GB = 1.0
# CPU 负载超过该值时只使用一半核心
HIGH_CPU_USAGE = 80
# CPU 负载的采样时长（秒），必须大于 0
CPU_SAMPLE_INTERVAL = 0.5


def check_system_resources():
    """
    检查当前机器可用于并行扫描的资源

    返回:
        dict: 包含系统、内存、CPU 信息以及推荐并行数的字典
    """
    try:
        os_name = platform.system()
        memory = psutil.virtual_memory()
        total_memory_gb = memory.total / (1024**3)
        available_memory_gb = memory.available / (1024**3)

        cpu_cores = psutil.cpu_count(logical=False)
        cpu_logical_cores = psutil.cpu_count(logical=True)
        cpu_usage = psutil.cpu_percent(interval=CPU_SAMPLE_INTERVAL)

        return {
            "os_info": {
                "name": os_name,
                "version": platform.version(),
                "is_linux": os_name.lower() == "linux"
            },
            "memory": {
                "total_gb": round(total_memory_gb, 2),
                "available_gb": round(available_memory_gb, 2)
            },
            "cpu": {
                "physical_cores": cpu_cores,
                "logical_cores": cpu_logical_cores,
                "usage_percent": cpu_usage
            },
            "summary": {
                "recommended_jobs": _jobs_from(cpu_cores or cpu_logical_cores or 1, available_memory_gb, cpu_usage)
            }
        }
    except Exception as e:
        logger.error(f"检查系统资源时出错: {str(e)}")
        # 返回一个保守的结果
        return {
            "error": str(e),
            "summary": {"recommended_jobs": 1}
        }


def _jobs_from(cores: int, available_memory_gb: float, cpu_usage: float) -> int:
    by_memory = int((available_memory_gb - RESERVED_MEMORY_GB) // MEMORY_PER_JOB_GB)
    jobs = min(cores, by_memory)
    if cpu_usage > HIGH_CPU_USAGE:
        jobs = jobs // 2
    return max(1, jobs)


def recommend_jobs(n_tasks: Optional[int] = None) -> int:
    """
    根据物理核心数、可用内存和当前 CPU 负载给出扫描的并行进程数

    Args:
        n_tasks: 待运行的任务数，并行数不会超过它
    """
    resources = check_system_resources()
    jobs = resources["summary"]["recommended_jobs"]
    if n_tasks is not None:
        jobs = max(1, min(jobs, n_tasks))
    logger.debug(f"推荐并行数: {jobs}")
    return jobs
