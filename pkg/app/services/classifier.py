import logging
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from app.core.errors import RejectedInputError
from app.models.experiments import ClassifierConfig
from app.services.datagen import LabeledDataset
from app.services.nn_core import DenseNetwork, LossKind, cross_entropy_batch, forward, train_network

logger = logging.getLogger(__name__)


class Classifier:
    """softmax 分类器：网络输出即 logits"""

    def __init__(self, network: DenseNetwork):
        if network.output_dim < 2:
            raise RejectedInputError("a classifier needs at least two output classes")
        self.network = network

    @property
    def num_classes(self) -> int:
        return self.network.output_dim

    @property
    def input_dim(self) -> int:
        return self.network.input_dim

    def logits(self, points: np.ndarray) -> np.ndarray:
        return forward(self.network, np.atleast_2d(points))

    def predict_proba(self, points: np.ndarray) -> np.ndarray:
        return softmax(self.logits(points), axis=1)

    def predict(self, points: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(points), axis=1)

    def per_example_loss(self, data: LabeledDataset) -> np.ndarray:
        return cross_entropy_batch(self.logits(data.points), data.labels)

    def accuracy(self, data: Optional[LabeledDataset]) -> Optional[float]:
        if data is None or len(data) == 0:
            return None
        return float(np.mean(self.predict(data.points) == data.labels))

    def to_bytes(self) -> bytes:
        return self.network.to_bytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Classifier":
        return cls(DenseNetwork.from_bytes(blob))


def build_classifier(input_dim: int, num_classes: int, hidden: Sequence[int], seed: int) -> Classifier:
    network = DenseNetwork.initialize([input_dim, *hidden, num_classes], np.random.default_rng(seed))
    return Classifier(network)


def train_classifier(data: LabeledDataset, cfg: ClassifierConfig, seed: Optional[int] = None,
                     init: Optional[Classifier] = None, epochs: Optional[int] = None) -> Classifier:
    """在 data 上做交叉熵小批量 SGD

    初始化和批次顺序都来自同一个种子；给定 init 时从其参数继续训练（FedAvg 本地更新）。
    """
    if len(data) == 0:
        raise RejectedInputError("cannot train a classifier on an empty dataset")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    if init is None:
        network = DenseNetwork.initialize([data.dim, *cfg.hidden, data.num_classes], rng)
    else:
        if init.input_dim != data.dim or init.num_classes != data.num_classes:
            raise RejectedInputError("initial classifier does not match the data shape")
        network = init.network
    n_epochs = cfg.epochs if epochs is None else epochs
    if n_epochs == 0:
        return Classifier(network.copy())
    result = train_network(network, data.points, data.labels, LossKind.CROSS_ENTROPY, cfg, rng=rng, epochs=n_epochs)
    logger.debug(f"Classifier trained on {len(data)} points, final loss {result.epoch_losses[-1]:.4f}")
    return Classifier(result.network)
