"""生成器/判别器的层结构与前向计算"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from scripts import autodiff as ad
from scripts.errors import DimensionError, DomainError
from scripts.sparse_param import SparseParam
from scripts.topology import LayerSpec


@dataclass
class NetworkSpec:
    name: str
    layers: List[LayerSpec]
    input_dim: int
    output_dim: int
    hidden_activation: str = 'relu'
    output_activation: str = 'none'
    slope: float = 0.2

    def __post_init__(self):
        width = self.input_dim
        for index, layer in enumerate(self.layers):
            expected = layer.fan_in if layer.kind == 'dense' else layer.fan_in * layer.output_spatial
            if width != expected:
                raise DimensionError(f"{self.name} 第 {index} 层输入维度 {expected} 与上一层输出 {width} 不一致")
            width = layer.fan_out if layer.kind == 'dense' else layer.fan_out * layer.output_spatial
        if width != self.output_dim:
            raise DimensionError(f"{self.name} 输出维度 {width} 与期望的 {self.output_dim} 不一致")

    @property
    def layer_names(self) -> List[str]:
        return [f"{self.name}.{i}.{layer.kind}" for i, layer in enumerate(self.layers)]


@dataclass
class GanSpec:
    generator: NetworkSpec
    discriminator: NetworkSpec
    d_z: int
    data_dim: int = 2

    def __post_init__(self):
        if self.generator.output_dim != self.data_dim:
            raise DimensionError(f"生成器输出维度 {self.generator.output_dim} 与数据维度 {self.data_dim} 不一致")
        if self.discriminator.input_dim != self.data_dim:
            raise DimensionError("判别器输入维度必须等于数据维度")
        if self.discriminator.output_dim != 1:
            raise DimensionError("判别器必须输出单个 logit")
        if self.generator.input_dim != self.d_z:
            raise DimensionError("生成器输入维度必须等于 d_z")


def _scaled(width: int, mult: float) -> int:
    return max(1, int(round(width * mult)))


def _mlp_layers(input_dim: int, hidden: Sequence[int], output_dim: int) -> List[LayerSpec]:
    widths = [input_dim, *hidden, output_dim]
    return [LayerSpec('dense', a, b) for a, b in zip(widths[:-1], widths[1:])]


def _conv_layers(input_dim: int, channels: int, spatial: int, kernel: int, output_dim: int) -> List[LayerSpec]:
    flat = channels * spatial * spatial
    return [
        LayerSpec('dense', input_dim, flat),
        LayerSpec('conv2d', channels, channels, kernel, kernel, (spatial, spatial)),
        LayerSpec('dense', flat, output_dim),
    ]


def build_ganspec(arch, data_dim: int = 2, width_mult: float = 1.0) -> GanSpec:
    """根据 ArchitectureConfig 构造 GanSpec

    Args:
        arch: run_config.ArchitectureConfig
        width_mult: 隐藏层宽度倍数（small_dense 基线使用 0.5）
    """
    if arch.kind == 'mlp':
        g_layers = _mlp_layers(arch.d_z, [_scaled(w, width_mult) for w in arch.g_hidden], data_dim)
        d_layers = _mlp_layers(data_dim, [_scaled(w, width_mult) for w in arch.d_hidden], 1)
    elif arch.kind == 'conv':
        channels = _scaled(arch.conv_channels, width_mult)
        g_layers = _conv_layers(arch.d_z, channels, arch.conv_spatial, arch.conv_kernel, data_dim)
        d_layers = _conv_layers(data_dim, channels, arch.conv_spatial, arch.conv_kernel, 1)
    else:
        raise DomainError(f"未知的网络结构: {arch.kind}")

    generator = NetworkSpec('G', g_layers, arch.d_z, data_dim,
                            hidden_activation=arch.g_activation, output_activation=arch.g_output)
    discriminator = NetworkSpec('D', d_layers, data_dim, 1,
                                hidden_activation=arch.d_activation, slope=arch.d_slope)
    return GanSpec(generator, discriminator, arch.d_z, data_dim)


class Network:
    """一组带掩码的层；weights 可剪枝，biases 始终稠密"""

    def __init__(self, spec: NetworkSpec, masks: Sequence[np.ndarray], rng: np.random.Generator):
        if len(masks) != len(spec.layers):
            raise DimensionError(f"{spec.name}: 掩码数量 {len(masks)} 与层数 {len(spec.layers)} 不一致")
        self.spec = spec
        self.weights: List[SparseParam] = []
        self.biases: List[Optional[SparseParam]] = []
        for name, layer, mask in zip(spec.layer_names, spec.layers, masks):
            fan_in = layer.fan_in * layer.kernel_h * layer.kernel_w
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=layer.weight_shape)
            self.weights.append(SparseParam(name=f"{name}.weight", values=values, mask=mask))
            if layer.kind == 'dense':
                bias = rng.uniform(-bound, bound, size=(layer.fan_out,))
                self.biases.append(SparseParam.dense(f"{name}.bias", bias, prunable=False))
            else:
                self.biases.append(None)

    @property
    def params(self) -> List[SparseParam]:
        out = []
        for weight, bias in zip(self.weights, self.biases):
            out.append(weight)
            if bias is not None:
                out.append(bias)
        return out

    @property
    def layers(self) -> List[LayerSpec]:
        return self.spec.layers

    def masks(self) -> List[np.ndarray]:
        return [w.mask.copy() for w in self.weights]

    def densities(self) -> List[float]:
        return [w.density for w in self.weights]

    def n_active(self) -> List[int]:
        return [w.n_active for w in self.weights]

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def forward(self, x: ad.Tensor, frozen: bool = False, source: str = 'values') -> ad.Tensor:
        """前向计算；frozen=True 时梯度只穿过网络，不写入参数"""
        h = x
        last = len(self.spec.layers) - 1
        for index, (layer, weight, bias) in enumerate(zip(self.spec.layers, self.weights, self.biases)):
            if layer.kind == 'conv2d':
                if h.data.ndim == 2:
                    h = ad.reshape(h, (h.data.shape[0], layer.fan_in, *layer.spatial))
                h = ad.conv2d(h, weight, padding='same', frozen=frozen, source=source)
            else:
                if h.data.ndim == 4:
                    h = ad.flatten(h)
                h = ad.masked_linear(h, weight, bias, frozen=frozen, source=source)
            if index < last:
                h = ad.activation(h, self.spec.hidden_activation, self.spec.slope)
            else:
                h = ad.activation(h, self.spec.output_activation, self.spec.slope)
        if h.data.ndim == 4:
            h = ad.flatten(h)
        return h

    def __call__(self, inputs: np.ndarray, source: str = 'values') -> np.ndarray:
        """不求梯度的前向计算，直接返回 numpy 数组"""
        graph = ad.Graph()
        return self.forward(graph.constant(inputs), frozen=True, source=source).data
