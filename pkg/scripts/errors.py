"""引擎使用的异常类型"""


class SparseEvolveError(Exception):
    """所有引擎异常的基类"""


class DimensionError(SparseEvolveError, ValueError):
    """张量形状不匹配"""


class DomainError(SparseEvolveError, ValueError):
    """参数超出定义域（稀疏度 ≥ 1、标签不在 {0,1} 等）"""


class ContractError(SparseEvolveError):
    """调用违反了前置条件"""


class NonFiniteError(SparseEvolveError, ArithmeticError):
    """出现 NaN/Inf，训练必须中止"""


class ScheduleExhausted(SparseEvolveError):
    """探索计划已结束（t > t_end）"""


class ConfigError(SparseEvolveError, ValueError):
    """配置错误"""


class MissingColumnsError(SparseEvolveError, ValueError):
    """结果 CSV 缺少必要的列"""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"结果文件缺少必要的列: {', '.join(self.missing)}")
