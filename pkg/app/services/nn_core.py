"""全连接网络引擎：前向、解析反向传播、SGD 以及参数的二进制序列化

去噪器和分类器共用这一套实现。所有计算都在 float64 下进行，
梯度检验的容差以此为前提。
"""
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from app.core.errors import RejectedInputError, TrainingDivergedError
from app.models.experiments import TrainConfig

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float]]

_MAGIC = b"MPNN"
_VERSION = 1
_HEADER = struct.Struct("<4sII")
_LAYER_HEADER = struct.Struct("<III")
_FLOAT = np.dtype("<f8")


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


_ACTIVATION_CODES = {Activation.IDENTITY: 0, Activation.RELU: 1}
_ACTIVATION_BY_CODE = {code: act for act, code in _ACTIVATION_CODES.items()}


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"


class LayerGradient(NamedTuple):
    weights: np.ndarray
    bias: np.ndarray


Gradient = List[LayerGradient]


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.IDENTITY

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def as_real_vector(values: ArrayLike, dim: Optional[int] = None) -> np.ndarray:
    """转换为有限的一维 float64 向量，可选校验维度"""
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise RejectedInputError(f"expected a non-empty vector, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise RejectedInputError("vector contains non-finite entries")
    if dim is not None and vector.size != dim:
        raise RejectedInputError(f"dimension mismatch: expected {dim}, got {vector.size}")
    return vector


class DenseNetwork:
    """由 DenseLayer 串联而成的网络，相邻层维度必须衔接"""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise RejectedInputError("a network needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.weights.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise RejectedInputError(f"layer {i} has inconsistent weight/bias shapes")
            if i > 0 and layers[i - 1].out_dim != layer.in_dim:
                raise RejectedInputError(
                    f"layer {i} expects {layer.in_dim} inputs but layer {i - 1} produces {layers[i - 1].out_dim}"
                )
        self.layers: List[DenseLayer] = list(layers)
        if not self.is_finite():
            raise RejectedInputError("network parameters must be finite")

    @classmethod
    def initialize(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: Activation = Activation.RELU,
        output_activation: Activation = Activation.IDENTITY,
    ) -> "DenseNetwork":
        """Glorot 均匀初始化：权重 U(±sqrt(6/(fan_in+fan_out)))，偏置为零"""
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise RejectedInputError(f"invalid layer dimensions: {list(dims)}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            activation = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer(
                weights=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                bias=np.zeros(fan_out),
                activation=activation,
            ))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_parameters(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.bias)) for l in self.layers)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([
            DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers
        ])

    def flatten(self) -> np.ndarray:
        """按层依次拼接权重（行优先）和偏置"""
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in self.layers])

    def with_parameters(self, flat: ArrayLike) -> "DenseNetwork":
        """用扁平参数向量构造同结构的新网络"""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_parameters,):
            raise RejectedInputError(f"expected {self.num_parameters} parameters, got {flat.shape}")
        layers, offset = [], 0
        for l in self.layers:
            w_size = l.weights.size
            weights = flat[offset:offset + w_size].reshape(l.weights.shape).copy()
            offset += w_size
            bias = flat[offset:offset + l.out_dim].copy()
            offset += l.out_dim
            layers.append(DenseLayer(weights, bias, l.activation))
        return DenseNetwork(layers)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(_MAGIC, _VERSION, len(self.layers))]
        for l in self.layers:
            parts.append(_LAYER_HEADER.pack(l.in_dim, l.out_dim, _ACTIVATION_CODES[l.activation]))
            parts.append(l.weights.astype(_FLOAT).tobytes(order="C"))
            parts.append(l.bias.astype(_FLOAT).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DenseNetwork":
        network, consumed = cls.read_from(blob, 0)
        if consumed != len(blob):
            raise RejectedInputError(f"{len(blob) - consumed} trailing bytes after network payload")
        return network

    @classmethod
    def read_from(cls, blob: bytes, offset: int) -> Tuple["DenseNetwork", int]:
        """从 blob 的 offset 处解析一个网络，返回网络和结束位置"""
        try:
            magic, version, n_layers = _HEADER.unpack_from(blob, offset)
            if magic != _MAGIC:
                raise RejectedInputError("not a network payload")
            if version != _VERSION:
                raise RejectedInputError(f"unsupported network format version {version}")
            offset += _HEADER.size
            layers = []
            for _ in range(n_layers):
                in_dim, out_dim, code = _LAYER_HEADER.unpack_from(blob, offset)
                offset += _LAYER_HEADER.size
                if code not in _ACTIVATION_BY_CODE:
                    raise RejectedInputError(f"unknown activation code {code}")
                w_count = in_dim * out_dim
                weights = np.frombuffer(blob, dtype=_FLOAT, count=w_count, offset=offset)
                offset += w_count * _FLOAT.itemsize
                bias = np.frombuffer(blob, dtype=_FLOAT, count=out_dim, offset=offset)
                offset += out_dim * _FLOAT.itemsize
                layers.append(DenseLayer(
                    weights.reshape(out_dim, in_dim).astype(np.float64),
                    bias.astype(np.float64),
                    _ACTIVATION_BY_CODE[code],
                ))
        except (struct.error, ValueError) as e:
            if isinstance(e, RejectedInputError):
                raise
            raise RejectedInputError(f"truncated network payload: {e}")
        return cls(layers), offset


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _as_batch(x: ArrayLike, dim: int) -> Tuple[np.ndarray, bool]:
    batch = np.asarray(x, dtype=np.float64)
    single = batch.ndim == 1
    if single:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise RejectedInputError(f"dimension mismatch: network expects {dim} inputs, got shape {np.shape(x)}")
    if not np.all(np.isfinite(batch)):
        raise RejectedInputError("input contains non-finite entries")
    return batch, single


def _forward_trace(net: DenseNetwork, batch: np.ndarray):
    """逐层前向，保留每层的输入和预激活，供反向传播使用"""
    inputs, pre_activations = [], []
    a = batch
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        pre_activations.append(z)
        a = _activate(z, layer.activation)
    return inputs, pre_activations, a


def forward(net: DenseNetwork, x: ArrayLike) -> np.ndarray:
    """前向计算；x 为单个向量时返回向量，为二维批次时返回逐行输出"""
    batch, single = _as_batch(x, net.input_dim)
    _, _, out = _forward_trace(net, batch)
    return out[0] if single else out


def _labels_for(target, batch_size: int, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(target))
    if labels.shape != (batch_size,) or not np.issubdtype(labels.dtype, np.integer):
        raise RejectedInputError(f"expected {batch_size} integer labels, got {labels!r}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise RejectedInputError(f"label out of range for {num_classes} classes")
    return labels


def cross_entropy_loss(logits: ArrayLike, label: int) -> float:
    """-log softmax(logits)[label]，以 log-sum-exp 稳定"""
    logits = as_real_vector(logits)
    if isinstance(label, bool) or not isinstance(label, (int, np.integer)):
        raise RejectedInputError(f"label must be an integer class index, got {label!r}")
    if not 0 <= label < logits.size:
        raise RejectedInputError(f"label {label} out of range for {logits.size} logits")
    return max(0.0, float(logsumexp(logits) - logits[label]))


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """逐样本交叉熵"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _labels_for(labels, logits.shape[0], logits.shape[1])
    losses = logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels]
    return np.maximum(losses, 0.0)


def mse_loss(pred: ArrayLike, target: ArrayLike) -> float:
    """逐分量平方差的均值"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise RejectedInputError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def _loss_and_output_grad(out: np.ndarray, loss_kind: LossKind, target) -> Tuple[float, np.ndarray]:
    batch_size = out.shape[0]
    if loss_kind == LossKind.CROSS_ENTROPY:
        labels = _labels_for(target, batch_size, out.shape[1])
        log_norm = logsumexp(out, axis=1, keepdims=True)
        probs = np.exp(out - log_norm)
        loss = float(np.mean(log_norm[:, 0] - out[np.arange(batch_size), labels]))
        grad = probs
        grad[np.arange(batch_size), labels] -= 1.0
        return loss, grad / batch_size
    if loss_kind == LossKind.MSE:
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 1 and batch_size == 1:
            target = target[None, :]
        if target.shape != out.shape:
            raise RejectedInputError(f"mse target shape {target.shape} does not match output shape {out.shape}")
        diff = out - target
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    raise RejectedInputError(f"unknown loss kind: {loss_kind}")


def loss_and_gradient(net: DenseNetwork, x: ArrayLike, loss_kind: LossKind, target) -> Tuple[float, Gradient]:
    """批次平均损失及其对全部参数的解析梯度"""
    batch, _ = _as_batch(x, net.input_dim)
    inputs, pre_activations, out = _forward_trace(net, batch)
    loss, delta = _loss_and_output_grad(out, LossKind(loss_kind), target)
    gradient: Gradient = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == Activation.RELU:
            delta = delta * (pre_activations[i] > 0.0)
        gradient[i] = LayerGradient(delta.T @ inputs[i], delta.sum(axis=0))
        if i > 0:
            delta = delta @ layer.weights
    return loss, gradient


def backward(net: DenseNetwork, x: ArrayLike, loss_kind: LossKind, target) -> Gradient:
    """解析反向传播；批次输入时梯度为批次均值"""
    return loss_and_gradient(net, x, loss_kind, target)[1]


def compute_loss(net: DenseNetwork, x: ArrayLike, loss_kind: LossKind, target) -> float:
    batch, _ = _as_batch(x, net.input_dim)
    _, _, out = _forward_trace(net, batch)
    return _loss_and_output_grad(out, LossKind(loss_kind), target)[0]


def _check_gradient_shape(net: DenseNetwork, gradient: Gradient) -> None:
    if len(gradient) != len(net.layers):
        raise RejectedInputError(f"gradient has {len(gradient)} layers, network has {len(net.layers)}")
    for i, (layer, g) in enumerate(zip(net.layers, gradient)):
        if np.shape(g.weights) != layer.weights.shape or np.shape(g.bias) != layer.bias.shape:
            raise RejectedInputError(f"gradient shape mismatch at layer {i}")


def _apply_update(net: DenseNetwork, gradient: Gradient, learning_rate: float) -> None:
    for layer, g in zip(net.layers, gradient):
        layer.weights -= learning_rate * g.weights
        layer.bias -= learning_rate * g.bias


def sgd_step(net: DenseNetwork, gradient: Gradient, learning_rate: float) -> DenseNetwork:
    """θ' = θ − η·g，返回新网络，原网络不变"""
    if not (learning_rate > 0 and np.isfinite(learning_rate)):
        raise RejectedInputError(f"learning rate must be positive, got {learning_rate}")
    _check_gradient_shape(net, gradient)
    updated = net.copy()
    _apply_update(updated, gradient, learning_rate)
    return updated


def gradient_check(net: DenseNetwork, x: ArrayLike, loss_kind: LossKind, target, step: float = 1e-5) -> float:
    """解析梯度与中心差分的最大相对误差 |a−n| / max(|a|, |n|, 1e-6)"""
    analytic = np.concatenate([np.concatenate([g.weights.ravel(), g.bias]) for g in backward(net, x, loss_kind, target)])
    params = net.flatten()
    numeric = np.empty_like(params)
    for i in range(params.size):
        shifted = params.copy()
        shifted[i] += step
        upper = compute_loss(net.with_parameters(shifted), x, loss_kind, target)
        shifted[i] -= 2 * step
        lower = compute_loss(net.with_parameters(shifted), x, loss_kind, target)
        numeric[i] = (upper - lower) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


@dataclass
class TrainingResult:
    network: DenseNetwork
    epoch_losses: List[float]


def train_network(
    net: DenseNetwork,
    inputs: np.ndarray,
    targets,
    loss_kind: LossKind,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    epochs: Optional[int] = None,
    sample_targets=None,
) -> TrainingResult:
    """打乱的小批量 SGD 训练，返回新网络

    sample_targets(batch_inputs, batch_targets, rng) 可在每个批次上重写输入和目标，
    扩散训练借此在线抽取时间步和噪声。每轮结束后检查参数是否仍然有限。
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise RejectedInputError("training inputs must be a non-empty 2-d array")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n_epochs = epochs if epochs is not None else cfg.epochs
    network = net.copy()
    n = inputs.shape[0]
    epoch_losses = []
    for epoch in range(n_epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_x, batch_t = inputs[idx], targets[idx]
            if sample_targets is not None:
                batch_x, batch_t = sample_targets(batch_x, batch_t, rng)
            loss, gradient = loss_and_gradient(network, batch_x, loss_kind, batch_t)
            _apply_update(network, gradient, cfg.learning_rate)
            total += loss * len(idx)
            seen += len(idx)
        if not network.is_finite():
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch + 1}")
        epoch_losses.append(total / seen)
        logger.debug(f"epoch {epoch + 1}/{n_epochs} loss={epoch_losses[-1]:.6f}")
    return TrainingResult(network, epoch_losses)
