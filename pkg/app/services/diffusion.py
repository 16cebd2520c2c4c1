"""条件 DDPM：噪声表、前向加噪、ε 预测训练目标与祖先采样"""
import logging
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import RejectedInputError
from app.models.experiments import DiffusionTrainConfig
from app.services.datagen import LabeledDataset
from app.services.decorators import monitor_performance
from app.services.nn_core import (
    ArrayLike,
    DenseNetwork,
    LossKind,
    forward,
    train_network,
)

logger = logging.getLogger(__name__)

TIME_EMBED_DIM = 10
_FREQUENCIES = np.pi * 2.0 ** np.arange(4)

_MAGIC = b"MPDD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIddII")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """β_t, α_t = 1−β_t, ᾱ_t = Π_{s≤t} α_s；数组下标 t−1 对应时间步 t"""
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_min: float
    beta_max: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t: int) -> int:
        if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or not 1 <= t <= self.T:
            raise RejectedInputError(f"time step {t!r} outside 1..{self.T}")
        return int(t)

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.T == other.T and np.array_equal(self.beta, other.beta)


def build_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """β 从 beta_min (t=1) 线性插值到 beta_max (t=T)"""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise RejectedInputError(f"T must be an integer >= 2, got {T!r}")
    if not 0 < beta_min < beta_max < 1:
        raise RejectedInputError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta_min), float(beta_max))


def schedule_from_config(cfg: DiffusionTrainConfig) -> NoiseSchedule:
    return build_linear_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max)


def _matching_vectors(a: ArrayLike, b: ArrayLike):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise RejectedInputError("inputs contain non-finite entries")
    return a, b


def forward_diffuse_step(x_prev: ArrayLike, t: int, schedule: NoiseSchedule, noise: ArrayLike) -> np.ndarray:
    """单步加噪 x_t = √(1−β_t)·x_{t−1} + √β_t·noise"""
    t = schedule.check_step(t)
    x_prev, noise = _matching_vectors(x_prev, noise)
    beta_t = schedule.beta[t - 1]
    return np.sqrt(1.0 - beta_t) * x_prev + np.sqrt(beta_t) * noise


def forward_diffuse_closed(x0: ArrayLike, t: int, schedule: NoiseSchedule, noise: ArrayLike) -> np.ndarray:
    """闭式边缘 x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise"""
    t = schedule.check_step(t)
    x0, noise = _matching_vectors(x0, noise)
    alpha_bar_t = schedule.alpha_bar[t - 1]
    return np.sqrt(alpha_bar_t) * x0 + np.sqrt(1.0 - alpha_bar_t) * noise


def time_embedding(t: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """t/T、√ᾱ_t 以及 4 个几何频率上的 (sin, cos)，共 10 维"""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    phase = (t / schedule.T)[:, None]
    angles = phase * _FREQUENCIES[None, :]
    return np.concatenate([
        phase,
        np.sqrt(schedule.alpha_bar[t - 1])[:, None],
        np.sin(angles),
        np.cos(angles),
    ], axis=1)


class ConditionalDenoiser:
    """ε_θ(x_t, y, t)：输入为 [x_t, 时间嵌入, one-hot(y)]，输出维度等于数据维度"""

    def __init__(self, body: DenseNetwork, data_dim: int, num_classes: int, schedule: NoiseSchedule):
        expected = data_dim + TIME_EMBED_DIM + num_classes
        if body.input_dim != expected:
            raise RejectedInputError(f"denoiser body expects {body.input_dim} inputs, conditioning needs {expected}")
        if body.output_dim != data_dim:
            raise RejectedInputError(f"denoiser body outputs {body.output_dim} values, data_dim is {data_dim}")
        self.body = body
        self.data_dim = data_dim
        self.num_classes = num_classes
        self.schedule = schedule

    @classmethod
    def initialize(cls, data_dim: int, num_classes: int, schedule: NoiseSchedule, hidden, rng) -> "ConditionalDenoiser":
        dims = [data_dim + TIME_EMBED_DIM + num_classes, *hidden, data_dim]
        return cls(DenseNetwork.initialize(dims, rng), data_dim, num_classes, schedule)

    def conditioning_inputs(self, x_t: np.ndarray, y: np.ndarray, t: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise RejectedInputError(f"class index outside 0..{self.num_classes - 1}")
        one_hot = np.eye(self.num_classes)[y]
        return np.concatenate([x_t, time_embedding(t, self.schedule), one_hot], axis=1)

    def predict_noise(self, x_t: np.ndarray, y, t) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = x_t.shape[0]
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        return forward(self.body, self.conditioning_inputs(x_t, y, t))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(_MAGIC, _VERSION, self.schedule.T, self.schedule.beta_min,
                              self.schedule.beta_max, self.data_dim, self.num_classes)
        return header + self.body.to_bytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ConditionalDenoiser":
        try:
            magic, version, T, beta_min, beta_max, data_dim, num_classes = _HEADER.unpack_from(blob, 0)
        except struct.error as e:
            raise RejectedInputError(f"truncated denoiser payload: {e}")
        if magic != _MAGIC or version != _VERSION:
            raise RejectedInputError("not a denoiser payload or unsupported version")
        body = DenseNetwork.from_bytes(blob[_HEADER.size:])
        return cls(body, data_dim, num_classes, build_linear_schedule(T, beta_min, beta_max))


@monitor_performance("diffusion", "train")
def diffusion_train(data: LabeledDataset, cfg: DiffusionTrainConfig,
                    seed: Optional[int] = None) -> ConditionalDenoiser:
    """以简化目标 ‖ε − ε_θ(x_t, y, t)‖² 训练条件去噪器

    每个小批量均匀抽取 t ∈ 1..T 和标准正态 ε，经闭式加噪得到 x_t。
    结果完全由种子决定（缺省使用 cfg.train.seed）。
    """
    if len(data) == 0:
        raise RejectedInputError("cannot train a denoiser on an empty dataset")
    schedule = schedule_from_config(cfg)
    seed = cfg.train.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    denoiser = ConditionalDenoiser.initialize(data.dim, data.num_classes, schedule, cfg.hidden, rng)
    epochs = cfg.resolve_epochs(data.num_classes, len(data))
    sqrt_ab = np.sqrt(schedule.alpha_bar)
    sqrt_1m_ab = np.sqrt(1.0 - schedule.alpha_bar)

    def noised_batch(x0, y, batch_rng):
        t = batch_rng.integers(1, schedule.T + 1, size=len(y))
        eps = batch_rng.standard_normal(x0.shape)
        x_t = sqrt_ab[t - 1, None] * x0 + sqrt_1m_ab[t - 1, None] * eps
        return denoiser.conditioning_inputs(x_t, y, t), eps

    logger.info(f"Training denoiser on {len(data)} points for {epochs} epochs (T={schedule.T})")
    result = train_network(denoiser.body, data.points, data.labels, LossKind.MSE, cfg.train,
                           rng=rng, epochs=epochs, sample_targets=noised_batch)
    logger.info(f"Denoiser loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}")
    return ConditionalDenoiser(result.network, data.dim, data.num_classes, schedule)


def sample(denoiser: ConditionalDenoiser, schedule: Optional[NoiseSchedule], y: int, count: int,
           seed: int) -> np.ndarray:
    """祖先采样，返回 (count, data_dim) 数组

    x_T ~ N(0, I)；x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε_θ)/√α_t + σ_t·z，σ_t² = β_t，t = 1 时 z = 0。
    """
    if schedule is None:
        schedule = denoiser.schedule
    elif not schedule.same_as(denoiser.schedule):
        raise RejectedInputError(
            f"sampling schedule (T={schedule.T}) differs from the one the denoiser was trained with "
            f"(T={denoiser.schedule.T})"
        )
    if isinstance(y, bool) or not isinstance(y, (int, np.integer)) or not 0 <= y < denoiser.num_classes:
        raise RejectedInputError(f"class {y!r} outside 0..{denoiser.num_classes - 1}")
    if count < 1:
        raise RejectedInputError(f"count must be at least 1, got {count}")
    rng = np.random.default_rng(seed)
    labels = np.full(count, int(y), dtype=np.int64)
    x = rng.standard_normal((count, denoiser.data_dim))
    for t in range(schedule.T, 0, -1):
        beta_t = schedule.beta[t - 1]
        eps = forward(denoiser.body, denoiser.conditioning_inputs(x, labels, np.full(count, t)))
        x = (x - beta_t / np.sqrt(1.0 - schedule.alpha_bar[t - 1]) * eps) / np.sqrt(schedule.alpha[t - 1])
        if t > 1:
            x = x + np.sqrt(beta_t) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("sampler produced non-finite values")
    return x


def sample_dataset(denoiser: ConditionalDenoiser, count_per_class: int, seed_for_class,
                   origin: int) -> LabeledDataset:
    """每个类别采样 count_per_class 个点，标签继承采样条件"""
    if count_per_class == 0:
        return LabeledDataset.empty(denoiser.data_dim, denoiser.num_classes)
    parts = []
    for y in range(denoiser.num_classes):
        points = sample(denoiser, None, y, count_per_class, seed_for_class(y))
        parts.append(LabeledDataset(points, np.full(count_per_class, y), denoiser.num_classes,
                                    np.full(count_per_class, origin)))
    return LabeledDataset.concat(parts)
