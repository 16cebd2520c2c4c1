"""服务端预测聚合（平均 / 投票）与集成的偏差-方差-协方差分解"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.core.errors import RejectedInputError
from app.models.experiments import AggregationMode
from app.models.reports import BvcReport

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-9


class VoteMode(str, Enum):
    RELATIVE = "relative"
    ABSOLUTE = "absolute"
    WEIGHTED = "weighted"


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """形状为 (M, N, C) 的概率张量：M 个分类器对同一批 N 个样本的预测"""
    probabilities: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.ndim != 3 or 0 in probs.shape:
            raise RejectedInputError(f"prediction set must be a non-empty (M, N, C) array, got {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise RejectedInputError("probabilities must be finite and nonnegative")
        if np.any(np.abs(probs.sum(axis=2) - 1.0) > PROBABILITY_TOLERANCE):
            raise RejectedInputError("every probability vector must sum to 1")
        object.__setattr__(self, "probabilities", probs)

    @property
    def num_classifiers(self) -> int:
        return self.probabilities.shape[0]

    @property
    def num_samples(self) -> int:
        return self.probabilities.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[2]

    @classmethod
    def from_classifiers(cls, classifiers: Sequence, points: np.ndarray) -> "PredictionSet":
        if not classifiers:
            raise RejectedInputError("need at least one classifier")
        return cls(np.stack([c.predict_proba(points) for c in classifiers]))

    def votes(self) -> np.ndarray:
        """每个分类器的 argmax 标签，形状 (M, N)"""
        return np.argmax(self.probabilities, axis=2)


@dataclass(frozen=True, eq=False)
class AggregateResult:
    probabilities: np.ndarray
    labels: np.ndarray


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
        raise RejectedInputError(f"weights must be nonnegative with a positive sum, got {list(weights)}")
    return w / w.sum()


def _check_weights(weights: Optional[Sequence[float]], m: int, must_sum_to_one: bool) -> np.ndarray:
    if weights is None:
        return np.full(m, 1.0 / m)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise RejectedInputError(f"expected {m} weights, got {w.size}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise RejectedInputError("weights must be finite and nonnegative")
    if must_sum_to_one and abs(w.sum() - 1.0) > PROBABILITY_TOLERANCE:
        raise RejectedInputError(f"weights must sum to 1, got {w.sum()}")
    if w.sum() <= 0:
        raise RejectedInputError("weights must not all be zero")
    return w


def aggregate_average(preds: PredictionSet, weights: Optional[Sequence[float]] = None) -> AggregateResult:
    """逐样本加权平均概率向量；argmax 平局取最小类别下标"""
    w = _check_weights(weights, preds.num_classifiers, must_sum_to_one=True)
    if preds.num_classifiers == 1:
        probs = preds.probabilities[0].copy()
    else:
        probs = np.tensordot(w, preds.probabilities, axes=1)
    return AggregateResult(probs, np.argmax(probs, axis=1))


def _vote_counts(votes: np.ndarray, num_classes: int, weights: np.ndarray) -> np.ndarray:
    m, n = votes.shape
    counts = np.zeros((n, num_classes))
    np.add.at(counts, (np.tile(np.arange(n), m), votes.ravel()), np.repeat(weights, n))
    return counts


def aggregate_vote(preds: PredictionSet, mode: Union[VoteMode, str],
                   weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """各分类器以 argmax 投票

    relative 取相对多数；absolute 要求票数超过 M/2，否则退回平均聚合的标签；
    weighted 按调用方给定的权重计票。
    """
    mode = VoteMode(mode)
    m = preds.num_classifiers
    votes = preds.votes()
    if mode == VoteMode.WEIGHTED:
        if weights is None:
            raise RejectedInputError("weighted voting needs one weight per classifier")
        vote_weights = _check_weights(weights, m, must_sum_to_one=False)
    else:
        vote_weights = np.ones(m)
    counts = _vote_counts(votes, preds.num_classes, vote_weights)
    labels = np.argmax(counts, axis=1)
    if mode == VoteMode.ABSOLUTE:
        no_majority = counts[np.arange(len(labels)), labels] <= m / 2
        if np.any(no_majority):
            logger.debug(f"Absolute majority missing on {int(no_majority.sum())} samples, falling back to averaging")
            labels = np.where(no_majority, aggregate_average(preds).labels, labels)
    return labels


def bvc_decompose(outputs: np.ndarray, targets: np.ndarray) -> BvcReport:
    """集成平方误差分解：mse = bias² + var/M + (1 − 1/M)·covar

    outputs 形状 (R, M, N)：R 次训练集重抽、M 个学习器、N 个样本；期望取 R 次的经验均值。
    """
    o = np.asarray(outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if o.ndim != 3:
        raise RejectedInputError(f"outputs must have shape (R, M, N), got {o.shape}")
    r, m, n = o.shape
    if r < 2:
        raise RejectedInputError(f"need at least two trials, got {r}")
    if m < 1 or n < 1 or t.shape != (n,):
        raise RejectedInputError(f"targets must have shape ({n},), got {t.shape}")
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(t))):
        raise RejectedInputError("outputs and targets must be finite")

    expected = o.mean(axis=0)
    deviation = o - expected
    bias = expected.mean(axis=0) - t
    second_moments = (deviation ** 2).mean(axis=0)
    variance = second_moments.mean(axis=0)
    if m > 1:
        pooled = (deviation.sum(axis=1) ** 2).mean(axis=0)
        covariance = (pooled - second_moments.sum(axis=0)) / (m * (m - 1))
    else:
        covariance = np.zeros(n)
    ensemble_mse = ((o.mean(axis=1) - t) ** 2).mean(axis=0)

    bias_sq = float(np.mean(bias ** 2))
    var = float(np.mean(variance))
    covar = float(np.mean(covariance))
    mse = float(np.mean(ensemble_mse))
    residual = abs(mse - (bias_sq + var / m + (1.0 - 1.0 / m) * covar))
    return BvcReport(
        bias_sq=bias_sq,
        variance=var,
        covariance=covar,
        ensemble_mse=mse,
        reconstruction_residual=residual,
        learners=m,
        trials=r,
        samples=n,
    )


def bvc_from_probabilities(prob_runs: np.ndarray, labels: np.ndarray) -> BvcReport:
    """把 (R, M, N, C) 概率标量化为真实类别的概率，目标恒为 1"""
    probs = np.asarray(prob_runs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 4 or labels.shape != (probs.shape[2],):
        raise RejectedInputError("prob_runs must be (R, M, N, C) with one label per sample")
    outputs = probs[:, :, np.arange(len(labels)), labels]
    return bvc_decompose(outputs, np.ones(len(labels)))


def prediction_table(preds: PredictionSet, aggregate: Optional[AggregateResult] = None,
                     names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """列式导出：sample_id、各分类器各类概率、聚合概率与标签"""
    aggregate = aggregate or aggregate_average(preds)
    names = list(names) if names is not None else [f"m{i + 1}" for i in range(preds.num_classifiers)]
    if len(names) != preds.num_classifiers:
        raise RejectedInputError("one name per classifier is required")
    columns = {"sample_id": np.arange(preds.num_samples)}
    for name, probs in zip(names, preds.probabilities):
        for c in range(preds.num_classes):
            columns[f"{name}_p{c}"] = probs[:, c]
    for c in range(preds.num_classes):
        columns[f"aggregate_p{c}"] = aggregate.probabilities[:, c]
    columns["label"] = aggregate.labels
    return pd.DataFrame(columns)


def export_predictions(path: Union[str, Path], preds: PredictionSet,
                       aggregate: Optional[AggregateResult] = None,
                       names: Optional[Sequence[str]] = None) -> None:
    prediction_table(preds, aggregate, names).to_csv(path, index=False)


class Ensemble:
    """服务端持有的分类器集合，按配置的聚合方式给出预测"""

    def __init__(self, classifiers: Sequence, mode: Union[AggregationMode, str] = AggregationMode.AVERAGE,
                 weights: Optional[Sequence[float]] = None):
        if not classifiers:
            raise RejectedInputError("an ensemble needs at least one classifier")
        self.classifiers = list(classifiers)
        self.mode = AggregationMode(mode)
        self.weights = None if weights is None else list(weights)
        if self.mode == AggregationMode.VOTE_WEIGHTED and self.weights is None:
            raise RejectedInputError("weighted voting needs one weight per classifier")

    def __len__(self) -> int:
        return len(self.classifiers)

    def prediction_set(self, points: np.ndarray) -> PredictionSet:
        return PredictionSet.from_classifiers(self.classifiers, points)

    def predict(self, points: np.ndarray, mode: Optional[Union[AggregationMode, str]] = None) -> np.ndarray:
        mode = self.mode if mode is None else AggregationMode(mode)
        preds = self.prediction_set(points)
        if mode == AggregationMode.AVERAGE:
            weights = None if self.weights is None else normalize_weights(self.weights)
            return aggregate_average(preds, weights).labels
        return aggregate_vote(preds, _VOTE_MODES[mode], self.weights)

    def accuracy(self, data, mode: Optional[Union[AggregationMode, str]] = None) -> Optional[float]:
        if data is None or len(data) == 0:
            return None
        return float(np.mean(self.predict(data.points, mode) == data.labels))

    def available_modes(self) -> List[AggregationMode]:
        modes = [AggregationMode.AVERAGE, AggregationMode.VOTE_RELATIVE, AggregationMode.VOTE_ABSOLUTE]
        if self.weights is not None:
            modes.append(AggregationMode.VOTE_WEIGHTED)
        return modes

    def with_mode(self, mode: Union[AggregationMode, str]) -> "Ensemble":
        return Ensemble(self.classifiers, mode, self.weights)


_VOTE_MODES = {
    AggregationMode.VOTE_RELATIVE: VoteMode.RELATIVE,
    AggregationMode.VOTE_ABSOLUTE: VoteMode.ABSOLUTE,
    AggregationMode.VOTE_WEIGHTED: VoteMode.WEIGHTED,
}
