import math
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.errors import ConfigValidationError

MAX_SEED = 2**64


class StrictModel(BaseModel):
    """所有配置段的基类：未知字段直接报错，实例不可变"""
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainConfig(StrictModel):
    learning_rate: float = Field(0.05, gt=0)
    epochs: int = Field(60, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = Field(0, ge=0, lt=MAX_SEED)


class ClassifierConfig(TrainConfig):
    """分类器训练配置，hidden 为隐藏层宽度（空列表即线性 softmax 模型）"""
    hidden: List[int] = Field(default_factory=lambda: [32, 32])

    @field_validator("hidden")
    @classmethod
    def validate_hidden(cls, v):
        if any(width < 1 for width in v):
            raise ValueError("hidden widths must be positive")
        return v


class DiffusionTrainConfig(StrictModel):
    """扩散模型训练配置

    β 默认取 DDPM 的 1e-4..0.02；桌面规模实验通过 defaults/desk_schedule.yaml 换用 5e-4..0.1。
    epoch_scale 非空时，轮数由 ceil(epoch_scale * 1e6 * C / |R|) 决定并以 max_epochs 截断；
    为空时使用 train.epochs。
    """
    timesteps: int = Field(200, ge=2)
    beta_min: float = Field(1e-4, gt=0, lt=1)
    beta_max: float = Field(0.02, gt=0, lt=1)
    hidden: List[int] = Field(default_factory=lambda: [128, 128])
    epoch_scale: Optional[float] = Field(0.5, gt=0)
    max_epochs: int = Field(10000, ge=1)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=200, batch_size=64))

    @model_validator(mode="after")
    def validate_schedule(self):
        if self.beta_min >= self.beta_max:
            raise ConfigValidationError("diffusion.beta_min", "beta_min must be below beta_max")
        if any(width < 1 for width in self.hidden):
            raise ConfigValidationError("diffusion.hidden", "hidden widths must be positive")
        return self

    def resolve_epochs(self, num_classes: int, data_size: int) -> int:
        if self.epoch_scale is None:
            return self.train.epochs
        scaled = math.ceil(self.epoch_scale * 1e6 * num_classes / max(data_size, 1))
        return max(1, min(self.max_epochs, scaled))


class MixtureSpec(StrictModel):
    """各向同性高斯混合：每类一个均值和标准差，外加类别先验"""
    means: List[List[float]] = Field(default_factory=lambda: [[-1.0, -1.0], [1.0, 1.0]])
    stds: List[float] = Field(default_factory=lambda: [0.2, 0.2])
    weights: List[float] = Field(default_factory=lambda: [0.5, 0.5])

    @model_validator(mode="after")
    def validate_mixture(self):
        if len(self.means) < 2:
            raise ConfigValidationError("data.mixture.means", "at least two classes are required")
        dim = len(self.means[0])
        if dim < 1 or any(len(m) != dim for m in self.means):
            raise ConfigValidationError("data.mixture.means", "all class means must share one positive dimension")
        if any(not math.isfinite(v) for m in self.means for v in m):
            raise ConfigValidationError("data.mixture.means", "means must be finite")
        if len(self.stds) != len(self.means):
            raise ConfigValidationError("data.mixture.stds", "one standard deviation per class is required")
        if any(not (s > 0 and math.isfinite(s)) for s in self.stds):
            raise ConfigValidationError("data.mixture.stds", "standard deviations must be positive")
        if len(self.weights) != len(self.means):
            raise ConfigValidationError("data.mixture.weights", "one prior weight per class is required")
        if any(w < 0 for w in self.weights) or abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ConfigValidationError("data.mixture.weights", "weights must be nonnegative and sum to 1")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return len(self.means[0])


class PartitionMode(str, Enum):
    IID = "iid"
    LABEL_SKEW = "label_skew"
    SITE_SHIFT = "site_shift"


class PartitionSpec(StrictModel):
    mode: PartitionMode = PartitionMode.IID
    n_clients: Optional[int] = Field(None, ge=2)
    concentration: Optional[float] = Field(None, gt=0)
    offsets: Optional[List[List[float]]] = None
    max_retries: int = Field(100, ge=0)

    @model_validator(mode="after")
    def validate_mode(self):
        if self.mode == PartitionMode.LABEL_SKEW and self.concentration is None:
            raise ConfigValidationError("partition.concentration", "label_skew requires a concentration")
        if self.mode == PartitionMode.SITE_SHIFT and self.offsets is None:
            raise ConfigValidationError("partition.offsets", "site_shift requires per-client offsets")
        if self.offsets is not None and self.n_clients is not None and len(self.offsets) != self.n_clients:
            raise ConfigValidationError("partition.offsets", "one offset vector per client is required")
        return self


class SplitFractions(StrictModel):
    train: float = Field(0.6, gt=0)
    validation: float = Field(0.2, gt=0)
    test: float = Field(0.2, gt=0)

    @model_validator(mode="after")
    def validate_sum(self):
        if abs(self.train + self.validation + self.test - 1.0) > 1e-9:
            raise ConfigValidationError("data.split", "fractions must sum to 1")
        return self

    def as_tuple(self):
        return (self.train, self.validation, self.test)


class DataConfig(StrictModel):
    count: int = Field(1200, ge=3)
    mixture: MixtureSpec = Field(default_factory=MixtureSpec)
    split: SplitFractions = Field(default_factory=SplitFractions)
    external_shift: Optional[List[float]] = None
    external_count: int = Field(400, ge=1)


class AggregationMode(str, Enum):
    AVERAGE = "average"
    VOTE_RELATIVE = "vote_relative"
    VOTE_ABSOLUTE = "vote_absolute"
    VOTE_WEIGHTED = "vote_weighted"


class AggregationConfig(StrictModel):
    mode: AggregationMode = AggregationMode.AVERAGE
    weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def validate_weights(self):
        if self.mode == AggregationMode.VOTE_WEIGHTED and self.weights is None:
            raise ConfigValidationError("aggregation.weights", "weighted voting requires weights")
        if self.weights is not None and any(w < 0 for w in self.weights):
            raise ConfigValidationError("aggregation.weights", "weights must be nonnegative")
        return self


class AuditConfig(StrictModel):
    delta: float = Field(0.1, gt=0)
    mia_size: int = Field(100, ge=1)
    mia_threshold: Optional[float] = None
    samples_per_class: int = Field(200, ge=1)


class FedAvgConfig(StrictModel):
    iters: int = Field(200, ge=1)
    local_epochs: int = Field(1, ge=0)
    weighted: bool = False


class BvcConfig(StrictModel):
    redraws: int = Field(10, ge=2)


class ExperimentConfig(StrictModel):
    """一次实验的完整配置，覆盖数据、协议、审计和基线的全部参数"""
    name: str = "experiment"
    seed: int = Field(0, ge=0, lt=MAX_SEED)
    n_clients: int = Field(3, ge=2)
    num_classes: Optional[int] = Field(None, ge=2)
    data: DataConfig = Field(default_factory=DataConfig)
    partition: PartitionSpec = Field(default_factory=PartitionSpec)
    diffusion: DiffusionTrainConfig = Field(default_factory=DiffusionTrainConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    gen_count: int = Field(400, ge=0)
    aggregation: AggregationConfig = Field(default_factory=AggregationConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    fedavg: FedAvgConfig = Field(default_factory=FedAvgConfig)
    bvc: BvcConfig = Field(default_factory=BvcConfig)

    @model_validator(mode="after")
    def validate_cross_fields(self):
        mixture = self.data.mixture
        if self.num_classes is not None and self.num_classes != mixture.num_classes:
            raise ConfigValidationError(
                "num_classes", f"{self.num_classes} does not match the {mixture.num_classes} mixture classes"
            )
        if self.partition.n_clients is not None and self.partition.n_clients != self.n_clients:
            raise ConfigValidationError(
                "partition.n_clients", f"{self.partition.n_clients} does not match n_clients={self.n_clients}"
            )
        if self.partition.offsets is not None:
            if len(self.partition.offsets) != self.n_clients:
                raise ConfigValidationError("partition.offsets", "one offset vector per client is required")
            if any(len(offset) != mixture.dim for offset in self.partition.offsets):
                raise ConfigValidationError("partition.offsets", f"offsets must have dimension {mixture.dim}")
        if self.data.external_shift is not None and len(self.data.external_shift) != mixture.dim:
            raise ConfigValidationError("data.external_shift", f"shift must have dimension {mixture.dim}")
        if self.aggregation.weights is not None and len(self.aggregation.weights) != self.n_clients:
            raise ConfigValidationError("aggregation.weights", "one weight per client is required")
        if int(self.data.count * self.data.split.train) < self.n_clients:
            raise ConfigValidationError("data.count", "training split is smaller than the number of clients")
        return self

    @property
    def resolved_num_classes(self) -> int:
        return self.data.mixture.num_classes

    @property
    def dim(self) -> int:
        return self.data.mixture.dim
