"""合成标注数据及其 IID / 非 IID 划分"""
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, RejectedInputError
from app.models.experiments import MixtureSpec, PartitionMode, PartitionSpec
from app.services.decorators import retry

logger = logging.getLogger(__name__)

REAL_ORIGIN = -1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """点集、标签和来源标记

    origin 为 -1 表示本地真实数据，k >= 1 表示由客户端 k 的去噪器生成。
    """
    points: np.ndarray
    labels: np.ndarray
    num_classes: int
    origin: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if points.ndim == 1 and points.size == 0:
            points = points.reshape(0, 0)
        if points.ndim != 2:
            raise RejectedInputError(f"points must be 2-d, got shape {points.shape}")
        if labels.shape != (points.shape[0],):
            raise RejectedInputError("points and labels must have equal length")
        if self.num_classes < 1:
            raise RejectedInputError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise RejectedInputError(f"labels must lie in 0..{self.num_classes - 1}")
        if not np.all(np.isfinite(points)):
            raise RejectedInputError("points contain non-finite coordinates")
        origin = np.full(len(labels), REAL_ORIGIN, dtype=np.int64) if self.origin is None \
            else np.asarray(self.origin, dtype=np.int64)
        if origin.shape != labels.shape:
            raise RejectedInputError("origin tags must match the number of points")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", origin)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def empty(cls, dim: int, num_classes: int) -> "LabeledDataset":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.points[idx], self.labels[idx], self.num_classes, self.origin[idx])

    def shifted(self, offset: Sequence[float]) -> "LabeledDataset":
        offset = np.asarray(offset, dtype=np.float64)
        if offset.shape != (self.dim,):
            raise RejectedInputError(f"offset must have dimension {self.dim}")
        return LabeledDataset(self.points + offset, self.labels, self.num_classes, self.origin)

    def with_origin(self, origin: int) -> "LabeledDataset":
        return LabeledDataset(self.points, self.labels, self.num_classes, np.full(len(self), origin))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @staticmethod
    def concat(datasets: Sequence["LabeledDataset"]) -> "LabeledDataset":
        """按顺序拼接（多重集语义，保留重复）"""
        if not datasets:
            raise RejectedInputError("nothing to concatenate")
        classes = {d.num_classes for d in datasets}
        dims = {d.dim for d in datasets if len(d)}
        if len(classes) != 1 or len(dims) > 1:
            raise RejectedInputError("datasets disagree on dimension or class count")
        non_empty = [d for d in datasets if len(d)] or [datasets[0]]
        return LabeledDataset(
            np.concatenate([d.points for d in non_empty]),
            np.concatenate([d.labels for d in non_empty]),
            datasets[0].num_classes,
            np.concatenate([d.origin for d in non_empty]),
        )

    def dumps(self) -> str:
        """列式文本：首行 d C count，之后每行 label x1 .. xd"""
        buffer = io.StringIO()
        buffer.write(f"{self.dim} {self.num_classes} {len(self)}\n")
        for label, point in zip(self.labels, self.points):
            buffer.write(" ".join([str(int(label))] + [repr(float(v)) for v in point]) + "\n")
        return buffer.getvalue()

    @classmethod
    def loads(cls, text: str) -> "LabeledDataset":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise RejectedInputError("empty dataset text")
        try:
            dim, num_classes, count = (int(v) for v in lines[0].split())
            rows = [line.split() for line in lines[1:]]
            if len(rows) != count or any(len(r) != dim + 1 for r in rows):
                raise RejectedInputError("dataset body does not match its header")
            labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
            points = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(count, dim)
        except ValueError as e:
            if isinstance(e, RejectedInputError):
                raise
            raise RejectedInputError(f"malformed dataset text: {e}")
        return cls(points, labels, num_classes)

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LabeledDataset":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def generate_mixture(spec: MixtureSpec, count: int, seed: int) -> LabeledDataset:
    """按先验抽标签，再从对应类的各向同性高斯抽点"""
    if count < 1:
        raise RejectedInputError(f"count must be at least 1, got {count}")
    rng = np.random.default_rng(seed)
    means = np.asarray(spec.means, dtype=np.float64)
    stds = np.asarray(spec.stds, dtype=np.float64)
    labels = rng.choice(spec.num_classes, size=count, p=np.asarray(spec.weights))
    noise = rng.standard_normal((count, spec.dim))
    points = means[labels] + stds[labels, None] * noise
    return LabeledDataset(points, labels, spec.num_classes)


class EmptyShardError(ValueError):
    pass


def _balanced_shards(indices: np.ndarray, n_clients: int) -> List[np.ndarray]:
    return [np.sort(part) for part in np.array_split(indices, n_clients)]


def _label_skew_shards(data: LabeledDataset, n_clients: int, concentration: float,
                       rng: np.random.Generator) -> List[np.ndarray]:
    """每个类别独立抽取 Dir(α) 客户端比例并按比例切分该类样本"""
    shards: List[List[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(data.num_classes):
        members = rng.permutation(np.flatnonzero(data.labels == c))
        proportions = rng.dirichlet(np.full(n_clients, concentration))
        cuts = (np.cumsum(proportions)[:-1] * len(members)).astype(np.int64)
        for k, part in enumerate(np.split(members, cuts)):
            shards[k].append(part)
    result = [np.sort(np.concatenate(parts)) for parts in shards]
    if any(len(shard) == 0 for shard in result):
        raise EmptyShardError("label-skew draw produced an empty shard")
    return result


def partition(data: LabeledDataset, spec: PartitionSpec, seed: int,
              n_clients: Optional[int] = None) -> List[LabeledDataset]:
    """把数据划分给 n 个客户端

    iid 与 label_skew 的分片互不相交且并集为输入；site_shift 在 iid 分片的基础上
    按客户端偏移量平移各自的点。
    """
    n = n_clients or spec.n_clients
    if n is None or n < 2:
        raise ConfigurationError("partition needs at least two clients")
    if len(data) == 0:
        raise RejectedInputError("cannot partition an empty dataset")
    if len(data) < n:
        raise ConfigurationError(f"{len(data)} points cannot fill {n} non-empty shards")
    rng = np.random.default_rng(seed)

    if spec.mode == PartitionMode.LABEL_SKEW:
        draw = retry(retries=spec.max_retries, exceptions=(EmptyShardError,))(_label_skew_shards)
        try:
            shards = draw(data, n, spec.concentration, rng)
        except EmptyShardError:
            raise ConfigurationError(
                f"label_skew(α={spec.concentration}) left a client empty after {spec.max_retries} retries"
            )
    else:
        shards = _balanced_shards(rng.permutation(len(data)), n)

    clients = [data.subset(idx) for idx in shards]
    if spec.mode == PartitionMode.SITE_SHIFT:
        if spec.offsets is None or len(spec.offsets) != n:
            raise ConfigurationError("site_shift needs one offset vector per client")
        clients = [client.shifted(offset) for client, offset in zip(clients, spec.offsets)]
    logger.info(f"Partitioned {len(data)} points ({spec.mode.value}) into sizes {[len(c) for c in clients]}")
    return clients


def split(data: LabeledDataset, fractions: Tuple[float, float, float],
          seed: int) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """打乱后切成 train / validation / test，大小为各比例取整，余数归入 test"""
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise RejectedInputError(f"all three fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise RejectedInputError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(data)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n_train + n_val > n:
        n_val = n - n_train
    order = np.random.default_rng(seed).permutation(n)
    return (
        data.subset(order[:n_train]),
        data.subset(order[n_train:n_train + n_val]),
        data.subset(order[n_train + n_val:]),
    )


def centroid_disparity(datasets: Sequence[LabeledDataset]) -> float:
    """客户端质心两两欧氏距离的均值，衡量各客户端分布的差异"""
    centroids = [d.centroid() for d in datasets if len(d)]
    if len(centroids) < 2:
        return 0.0
    distances = [
        float(np.linalg.norm(a - b))
        for i, a in enumerate(centroids) for b in centroids[i + 1:]
    ]
    return float(np.mean(distances))
