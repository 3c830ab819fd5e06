"""最小化的反向模式自动微分

计算图是一条按构造顺序记录的磁带：节点的输入总是排在节点之前，
backward 严格按构造顺序的逆序访问节点，保证结果逐位可复现。
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scripts.errors import ContractError, DimensionError, DomainError, NonFiniteError
from scripts.sparse_param import SparseParam

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    backward_fn: Optional[BackwardFn] = None
    param: Optional[SparseParam] = None
    frozen: bool = False


class Tensor:
    """计算图中某个节点的句柄"""
    __slots__ = ('graph', 'index')

    def __init__(self, graph: 'Graph', index: int):
        self.graph = graph
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def op(self) -> str:
        return self.graph.nodes[self.index].op

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __mul__(self, factor: float) -> 'Tensor':
        return scale(self, float(factor))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"


class Graph:
    """一次前向计算的磁带"""

    def __init__(self):
        self.nodes: List[Node] = []

    def _add(self, op: str, inputs: Sequence[Tensor], value: np.ndarray,
             backward_fn: BackwardFn = None, param: SparseParam = None, frozen: bool = False) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} 产生了非有限值")
        input_ids = tuple(t.index for t in inputs)
        for t in inputs:
            if t.graph is not self:
                raise ContractError(f"{op} 的输入来自另一个计算图")
        self.nodes.append(Node(op, input_ids, value, backward_fn, param, frozen))
        return Tensor(self, len(self.nodes) - 1)

    def constant(self, array) -> Tensor:
        return self._add('const', (), np.array(array, dtype=np.float64))

    def detach(self, tensor: Tensor) -> Tensor:
        return self.constant(tensor.data)

    def param(self, p: SparseParam, source: str = 'values', frozen: bool = False) -> Tensor:
        """参数叶子节点，值为 values ⊙ mask（或 SEMA/EMA 影子权重）"""
        return self._add('param', (), p.effective(source), param=p, frozen=frozen or source != 'values')

    def backward(self, loss: Tensor) -> List[SparseParam]:
        """从标量 loss 反向传播，把梯度写入所有未冻结的 SparseParam

        Returns:
            本次得到梯度的参数列表（按首次出现顺序）
        """
        if loss.graph is not self:
            raise ContractError("loss 不属于该计算图")
        if loss.data.shape != ():
            raise ContractError(f"backward 需要标量 loss，实际形状为 {loss.data.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.index] = np.ones((), dtype=np.float64)
        touched: List[SparseParam] = []

        for index in range(loss.index, -1, -1):
            grad = grads[index]
            if grad is None:
                continue
            node = self.nodes[index]
            if node.op == 'param':
                if not node.frozen:
                    node.param.accumulate_grad(grad)
                    if not any(p is node.param for p in touched):
                        touched.append(node.param)
                continue
            if node.backward_fn is None:
                continue
            for input_id, input_grad in zip(node.inputs, node.backward_fn(grad)):
                if input_grad is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = input_grad
                else:
                    grads[input_id] = grads[input_id] + input_grad
            grads[index] = None
        return touched


def backward(graph: Graph, loss: Tensor) -> List[SparseParam]:
    return graph.backward(loss)


def _check_param_shape(p: SparseParam):
    if p.mask.shape != p.values.shape:
        raise DimensionError(f"{p.name}: 掩码形状 {p.mask.shape} 与权重形状 {p.values.shape} 不一致")


def masked_linear(x: Tensor, p: SparseParam, bias: Optional[SparseParam] = None,
                  frozen: bool = False, source: str = 'values') -> Tensor:
    """y = x · (values ⊙ mask) + bias

    Args:
        x: [batch, in]
        p: [in, out] 的稀疏权重
        bias: [out] 的稠密偏置，可为空
        frozen: 为 True 时梯度只穿过该层传给输入，不写入参数
        source: 前向使用的权重来源 values/sema/ema
    """
    _check_param_shape(p)
    if x.data.ndim != 2 or p.values.ndim != 2 or x.data.shape[1] != p.values.shape[0]:
        raise DimensionError(f"masked_linear 形状不匹配: x{x.data.shape} · W{p.values.shape}")
    if bias is not None and bias.values.shape != (p.values.shape[1],):
        raise DimensionError(f"偏置形状 {bias.values.shape} 与输出维度 {p.values.shape[1]} 不一致")

    graph = x.graph
    w = graph.param(p, source=source, frozen=frozen)
    inputs = [x, w]
    out = x.data @ w.data
    if bias is not None:
        b = graph.param(bias, source=source, frozen=frozen)
        inputs.append(b)
        out = out + b.data

    x_data, w_data = x.data, w.data

    def _backward(g):
        grad_x = g @ w_data.T
        # 对有效权重的梯度即未掩码的稠密梯度；掩码在 accumulate_grad 中施加
        grad_w = x_data.T @ g
        if bias is not None:
            return grad_x, grad_w, g.sum(axis=0)
        return grad_x, grad_w

    return graph._add('masked_linear', inputs, out, _backward)


def _same_padding(k: int) -> Tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, p: SparseParam, padding: str = 'same',
           frozen: bool = False, source: str = 'values') -> Tensor:
    """步长为 1 的二维互相关，卷积核先乘掩码

    Args:
        x: [batch, c_in, h, w]
        p: [c_out, c_in, kh, kw]
        padding: 'same'（输出与输入同尺寸）或 'valid'
    """
    _check_param_shape(p)
    if x.data.ndim != 4 or p.values.ndim != 4 or x.data.shape[1] != p.values.shape[1]:
        raise DimensionError(f"conv2d 形状不匹配: x{x.data.shape}, kernel{p.values.shape}")
    _, _, h, w_in = x.data.shape
    _, _, kh, kw = p.values.shape
    if padding == 'same':
        pad_h, pad_w = _same_padding(kh), _same_padding(kw)
    elif padding == 'valid':
        pad_h, pad_w = (0, 0), (0, 0)
    else:
        raise DomainError(f"不支持的 padding 模式: {padding}")
    if kh > h + sum(pad_h) or kw > w_in + sum(pad_w):
        raise DimensionError(f"卷积核 {kh}x{kw} 大于填充后的输入 {h + sum(pad_h)}x{w_in + sum(pad_w)}")

    graph = x.graph
    k = graph.param(p, source=source, frozen=frozen)
    kernel = k.data
    x_padded = np.pad(x.data, ((0, 0), (0, 0), pad_h, pad_w))
    windows = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    out = np.einsum('bchwij,ocij->bohw', windows, kernel)
    out_h, out_w = out.shape[2], out.shape[3]

    def _backward(g):
        grad_kernel = np.einsum('bchwij,bohw->ocij', windows, g)
        grad_padded = np.zeros_like(x_padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + out_h, j:j + out_w] += np.einsum('bohw,oc->bchw', g, kernel[:, :, i, j])
        grad_x = grad_padded[:, :, pad_h[0]:pad_h[0] + h, pad_w[0]:pad_w[0] + w_in]
        return grad_x, grad_kernel

    return graph._add('conv2d', [x, k], out, _backward)


def relu(x: Tensor) -> Tensor:
    gate = (x.data > 0).astype(np.float64)
    return x.graph._add('relu', [x], x.data * gate, lambda g: (g * gate,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    gate = np.where(x.data > 0, 1.0, slope)
    return x.graph._add('leaky_relu', [x], x.data * gate, lambda g: (g * gate,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return x.graph._add('tanh', [x], out, lambda g: (g * (1.0 - out ** 2),))


def stable_sigmoid(values: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return x.graph._add('sigmoid', [x], out, lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, name: str, slope: float = 0.2) -> Tensor:
    if name == 'relu':
        return relu(x)
    if name == 'leaky_relu':
        return leaky_relu(x, slope)
    if name == 'tanh':
        return tanh(x)
    if name == 'sigmoid':
        return sigmoid(x)
    if name in ('none', 'linear', None):
        return x
    raise DomainError(f"未知的激活函数: {name}")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"无法把形状 {original} 变为 {shape}") from e
    return x.graph._add('reshape', [x], out, lambda g: (g.reshape(original),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.data.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add 形状不匹配: {a.data.shape} vs {b.data.shape}")
    return a.graph._add('add', [a, b], a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return x.graph._add('scale', [x], x.data * factor, lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return x.graph._add('sum', [x], np.sum(x.data), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.data.shape, x.data.size
    return x.graph._add('mean', [x], np.mean(x.data), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def bce_logits_loss(logits: Tensor, targets) -> Tensor:
    """批均值的二元交叉熵，直接由 logits 以 log-sum-exp 稳定形式计算

    Args:
        logits: [batch] 或 [batch, 1]
        targets: 取值只能是 0 或 1
    """
    l = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape != l.shape:
        raise DimensionError(f"targets 形状 {t.shape} 与 logits 形状 {l.shape} 不一致")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise DomainError("bce_logits_loss 的标签必须在 {0,1} 中")

    n = l.size
    loss = np.mean(np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l))))
    logits_shape = logits.data.shape

    def _backward(g):
        return ((g * (stable_sigmoid(l) - t) / n).reshape(logits_shape),)

    return logits.graph._add('bce_logits', [logits], loss, _backward)
