"""二维合成分布：ring8 / grid25 / checkerboard"""
from dataclasses import dataclass

import numpy as np

from scripts.errors import DomainError


@dataclass
class DataSampler:
    kind: str
    centers: np.ndarray
    sigma: float

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.sigma <= 0:
            raise DomainError(f"σ 必须为正，实际为 {self.sigma}")
        if len(np.unique(self.centers, axis=0)) != len(self.centers):
            raise DomainError("模式中心必须互不相同")

    @property
    def n_modes(self) -> int:
        return int(self.centers.shape[0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """从混合分布中采样 n 个二维点"""
        modes = rng.integers(0, self.n_modes, size=n)
        if self.kind == 'checkerboard':
            # 在对应的方格内均匀分布，方格边长 1
            return self.centers[modes] + rng.uniform(-0.5, 0.5, size=(n, 2))
        return self.centers[modes] + self.sigma * rng.standard_normal((n, 2))


def ring_centers(n: int = 8, radius: float = 2.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def grid_centers(side: int = 5, spacing: float = 2.0) -> np.ndarray:
    coords = (np.arange(side) - (side - 1) / 2.0) * spacing
    xx, yy = np.meshgrid(coords, coords, indexing='ij')
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)


def checkerboard_centers() -> np.ndarray:
    """[-2,2]² 上 4×4 棋盘中 (i+j) 为偶数的 8 个方格中心"""
    centers = [(-1.5 + i, -1.5 + j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    return np.asarray(centers, dtype=np.float64)


def make_sampler(kind: str, sigma: float = None) -> DataSampler:
    if kind == 'ring8':
        return DataSampler(kind, ring_centers(8, 2.0), sigma or 0.02)
    if kind == 'grid25':
        return DataSampler(kind, grid_centers(5, 2.0), sigma or 0.05)
    if kind == 'checkerboard':
        return DataSampler(kind, checkerboard_centers(), sigma or 0.25)
    raise DomainError(f"未知的数据集: {kind}")
