"""一次实验共享的数据准备、去噪器/生成样本缓存与评估"""
import logging
import threading
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Sequence

from app.core.errors import RejectedInputError
from app.core.seeding import derive_seed
from app.models.experiments import ExperimentConfig
from app.models.reports import SplitAccuracy
from app.services.datagen import LabeledDataset, generate_mixture, partition, split
from app.services.diffusion import ConditionalDenoiser, diffusion_train, sample_dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ExperimentData:
    """训练集划分出的各客户端数据 R_1..R_n 以及公共评估集"""
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset
    clients: List[LabeledDataset]
    external: Optional[LabeledDataset] = None

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def client(self, k: int) -> LabeledDataset:
        """k 从 1 开始"""
        if not 1 <= k <= self.n_clients:
            raise RejectedInputError(f"client {k} outside 1..{self.n_clients}")
        return self.clients[k - 1]

    def evaluation_sets(self) -> Dict[str, Optional[LabeledDataset]]:
        return {"validation": self.validation, "test": self.test, "external": self.external}


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    """生成混合分布数据，切分 train/validation/test，再把 train 划分给各客户端"""
    full = generate_mixture(config.data.mixture, config.data.count, derive_seed(config.seed, "data"))
    train, validation, test = split(full, config.data.split.as_tuple(), derive_seed(config.seed, "split"))
    clients = partition(train, config.partition, derive_seed(config.seed, "partition"), n_clients=config.n_clients)
    external = None
    if config.data.external_shift is not None:
        external = generate_mixture(
            config.data.mixture, config.data.external_count, derive_seed(config.seed, "external")
        ).shifted(config.data.external_shift)
    return ExperimentData(train, validation, test, clients, external)


def combine_training_set(real: LabeledDataset, synthetic: Sequence[LabeledDataset]) -> LabeledDataset:
    """D_k = S^k ∪ R_k，按来源顺序拼接后接本地真实数据"""
    return LabeledDataset.concat([*synthetic, real])


def evaluate(model, data: ExperimentData) -> SplitAccuracy:
    """model 需提供 accuracy(LabeledDataset)"""
    return SplitAccuracy(**{name: model.accuracy(subset) for name, subset in data.evaluation_sets().items()})


class SyntheticPool:
    """按客户端缓存去噪器，按 (接收方, 来源, 数量) 缓存生成样本

    同一配置下消融网格、生成数量扫描与集中式基线共享同一批去噪器和样本，
    结果与协议运行中客户端自行训练/采样的结果逐位一致。
    """

    def __init__(self, config: ExperimentConfig, data: ExperimentData):
        self.config = config
        self.data = data
        self._denoisers: Dict[int, bytes] = {}
        self._samples: Dict[Hashable, LabeledDataset] = {}
        self._guard = threading.Lock()
        self._locks: Dict[Hashable, threading.Lock] = {}

    def _lock_for(self, key: Hashable) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def denoiser_blob(self, k: int) -> bytes:
        """客户端 k 的去噪器（序列化形式），首次调用时训练"""
        with self._lock_for(("denoiser", k)):
            if k not in self._denoisers:
                denoiser = diffusion_train(
                    self.data.client(k), self.config.diffusion, seed=derive_seed(self.config.seed, "denoiser", k)
                )
                self._denoisers[k] = denoiser.to_bytes()
            return self._denoisers[k]

    def denoiser(self, k: int) -> ConditionalDenoiser:
        return ConditionalDenoiser.from_bytes(self.denoiser_blob(k))

    def trained_clients(self) -> List[int]:
        return sorted(self._denoisers)

    def synthesize(self, receiver: Hashable, source: int, count: int,
                   denoiser: Optional[ConditionalDenoiser] = None) -> LabeledDataset:
        """用来源 source 的去噪器为 receiver 每类生成 count 个点，标记来源为 source"""
        if count == 0:
            return LabeledDataset.empty(self.config.dim, self.config.resolved_num_classes)
        key = ("sample", receiver, source, count)
        with self._lock_for(key):
            if key not in self._samples:
                model = denoiser if denoiser is not None else self.denoiser(source)
                self._samples[key] = sample_dataset(
                    model,
                    count,
                    lambda y: derive_seed(self.config.seed, "sample", receiver, source, y),
                    origin=source,
                )
            return self._samples[key]

    def synthetic_for(self, k: int, count: int) -> List[LabeledDataset]:
        """S^k 的各来源部分：除 k 以外所有客户端的去噪器，按来源编号升序"""
        return [self.synthesize(k, source, count) for source in range(1, self.data.n_clients + 1) if source != k]
