"""桌面规模的生成质量指标：模式覆盖率、高质量样本比例、切片 Wasserstein-1 距离"""
from dataclasses import asdict, dataclass

import numpy as np

from scripts.datasets import DataSampler
from scripts.errors import ContractError


@dataclass
class MetricsReport:
    mode_coverage: float
    hq_ratio: float
    w1: float

    def to_dict(self) -> dict:
        return asdict(self)


def _distances_to_centers(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = samples[:, None, :] - centers[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mode_coverage(samples: np.ndarray, sampler: DataSampler, radius_mult: float = 3.0) -> float:
    """至少有 max(1, 0.2·n/K) 个样本落在中心 radius_mult·σ 范围内的模式占比"""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ContractError("样本不能为空")
    n, k = samples.shape[0], sampler.n_modes
    within = _distances_to_centers(samples, sampler.centers) <= radius_mult * sampler.sigma
    threshold = max(1.0, 0.2 * n / k)
    covered = int(np.sum(within.sum(axis=0) >= threshold))
    return covered / k


def hq_ratio(samples: np.ndarray, sampler: DataSampler, radius_mult: float = 3.0) -> float:
    """距最近中心不超过 radius_mult·σ 的样本比例"""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ContractError("样本不能为空")
    nearest = _distances_to_centers(samples, sampler.centers).min(axis=1)
    return float(np.mean(nearest <= radius_mult * sampler.sigma))


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """两个一维经验分布之间的 W1 = ∫|F_a - F_b| dx（样本数可以不同）"""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    gaps = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side='right') / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side='right') / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * gaps))


def random_directions(n_projections: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_projections, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def sliced_w1(samples: np.ndarray, reference_samples: np.ndarray,
              n_projections: int = 128, seed: int = 0) -> float:
    """在随机单位方向上投影后，一维 W1 的平均值"""
    samples = np.asarray(samples, dtype=np.float64)
    reference_samples = np.asarray(reference_samples, dtype=np.float64)
    if samples.shape[0] == 0 or reference_samples.shape[0] == 0:
        raise ContractError("样本不能为空")
    directions = random_directions(n_projections, samples.shape[1], seed)
    projected_a = samples @ directions.T
    projected_b = reference_samples @ directions.T
    distances = [wasserstein_1d(projected_a[:, i], projected_b[:, i]) for i in range(n_projections)]
    return float(np.mean(distances))


def evaluate_samples(samples: np.ndarray, sampler: DataSampler, reference: np.ndarray,
                     radius_mult: float = 3.0, n_projections: int = 128, seed: int = 0) -> MetricsReport:
    return MetricsReport(
        mode_coverage=mode_coverage(samples, sampler, radius_mult),
        hq_ratio=hq_ratio(samples, sampler, radius_mult),
        w1=sliced_w1(samples, reference, n_projections, seed),
    )
