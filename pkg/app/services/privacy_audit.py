"""隐私审计：生成样本的记忆扫描与基于损失阈值的成员推断攻击"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.metrics import roc_auc_score

from app.core.errors import RejectedInputError
from app.core.seeding import make_rng
from app.models.experiments import AuditConfig
from app.models.reports import (
    AuditSummary,
    MemorizationReport,
    MemorizationRow,
    MemorizationSummary,
    MIAReport,
    MiaSummary,
)
from app.services.classifier import Classifier
from app.services.datagen import REAL_ORIGIN, LabeledDataset
from app.services.diffusion import ConditionalDenoiser, sample_dataset
from app.services.nn_core import ArrayLike, as_real_vector

logger = logging.getLogger(__name__)

_SCAN_CHUNK = 1024


def l2_distance(a: ArrayLike, b: ArrayLike) -> float:
    """按维度归一化的欧氏距离 √(Σ(a_i − b_i)² / d)"""
    a = as_real_vector(a)
    b = as_real_vector(b, dim=a.size)
    return float(np.sqrt(np.sum((a - b) ** 2) / a.size))


def memorization_scan(generated: LabeledDataset, training: LabeledDataset, delta: float = 0.1) -> MemorizationReport:
    """对每个生成样本穷举训练集，求最小归一化距离；距离 ≤ δ 即标记为记忆"""
    if len(generated) == 0 or len(training) == 0:
        raise RejectedInputError("memorization scan needs non-empty generated and training sets")
    if generated.dim != training.dim:
        raise RejectedInputError(f"dimension mismatch: {generated.dim} vs {training.dim}")
    if not delta >= 0:
        raise RejectedInputError(f"delta must be nonnegative, got {delta}")

    d = generated.dim
    nearest = np.empty(len(generated), dtype=np.int64)
    minimum = np.empty(len(generated))
    for start in range(0, len(generated), _SCAN_CHUNK):
        block = generated.points[start:start + _SCAN_CHUNK]
        distances = np.sqrt(cdist(block, training.points, "sqeuclidean") / d)
        idx = np.argmin(distances, axis=1)
        nearest[start:start + len(block)] = idx
        minimum[start:start + len(block)] = distances[np.arange(len(block)), idx]

    flagged = minimum <= delta
    rows = [
        MemorizationRow(min_distance=float(dist), nearest_index=int(i), flagged=bool(f))
        for dist, i, f in zip(minimum, nearest, flagged)
    ]
    return MemorizationReport(
        delta=float(delta),
        global_min=float(minimum.min()),
        flag_count=int(flagged.sum()),
        rows=rows,
    )


def _row_keys(data: LabeledDataset) -> set:
    return {(int(label), point.tobytes()) for label, point in zip(data.labels, data.points)}


def _attack_accuracy(member_losses: np.ndarray, nonmember_losses: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """成员判定为 loss < τ；返回两组上判定正确的比例"""
    members_sorted = np.sort(member_losses)
    nonmembers_sorted = np.sort(nonmember_losses)
    hits = np.searchsorted(members_sorted, tau, side="left")
    rejections = len(nonmembers_sorted) - np.searchsorted(nonmembers_sorted, tau, side="left")
    return (hits + rejections) / (len(member_losses) + len(nonmember_losses))


def _candidate_thresholds(losses: np.ndarray) -> np.ndarray:
    distinct = np.unique(losses)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[distinct[0] - 1.0], midpoints, [distinct[-1] + 1.0]])


def mia_loss_threshold(model: Classifier, members: LabeledDataset, nonmembers: LabeledDataset,
                       tau: Optional[float] = None) -> MIAReport:
    """损失阈值成员推断

    逐例计算交叉熵；未给定 τ 时在相邻有序损失的中点（外加两端的退化阈值）上扫描，
    取准确率最高者（平局取最小 τ）。
    """
    if len(members) == 0 or len(nonmembers) == 0:
        raise RejectedInputError("member and non-member sets must be non-empty")
    if len(members) != len(nonmembers):
        raise RejectedInputError(
            f"member and non-member sets must be balanced, got {len(members)} vs {len(nonmembers)}"
        )
    if _row_keys(members) & _row_keys(nonmembers):
        raise RejectedInputError("member and non-member sets overlap")

    member_losses = model.per_example_loss(members)
    nonmember_losses = model.per_example_loss(nonmembers)
    candidates = _candidate_thresholds(np.concatenate([member_losses, nonmember_losses]))
    sweep = _attack_accuracy(member_losses, nonmember_losses, candidates)
    best = int(np.argmax(sweep))
    best_tau = float(candidates[best])
    used_tau = best_tau if tau is None else float(tau)
    accuracy = float(_attack_accuracy(member_losses, nonmember_losses, np.array([used_tau]))[0])

    truth = np.concatenate([np.ones(len(members)), np.zeros(len(nonmembers))])
    auc = float(roc_auc_score(truth, -np.concatenate([member_losses, nonmember_losses])))
    return MIAReport(
        tau=used_tau,
        accuracy=accuracy,
        best_tau=best_tau,
        best_accuracy=float(sweep[best]),
        auc=auc,
        size=len(members),
        member_losses=member_losses.tolist(),
        nonmember_losses=nonmember_losses.tolist(),
    )


def balanced_membership_sets(train: LabeledDataset, holdout: LabeledDataset, size: int,
                             rng: np.random.Generator) -> Tuple[LabeledDataset, LabeledDataset]:
    """成员取训练集中的真实点（若无真实点则取整个训练集），非成员取等量的留出点"""
    real = np.flatnonzero(train.origin == REAL_ORIGIN)
    pool = real if len(real) else np.arange(len(train))
    m = min(size, len(pool), len(holdout))
    if m == 0:
        raise RejectedInputError("not enough points to build balanced membership sets")
    members = train.subset(np.sort(rng.choice(pool, size=m, replace=False)))
    nonmembers = holdout.subset(np.sort(rng.choice(len(holdout), size=m, replace=False)))
    return members, nonmembers


@dataclass
class AuditResult:
    summary: AuditSummary
    memorization: Dict[str, MemorizationReport] = field(default_factory=dict)
    mia: Dict[str, MIAReport] = field(default_factory=dict)


def run_privacy_audit(denoisers: Dict[str, Tuple[ConditionalDenoiser, LabeledDataset]],
                      classifiers: Dict[str, Tuple[Classifier, LabeledDataset]],
                      holdout: LabeledDataset, cfg: AuditConfig, seed: int) -> AuditResult:
    """审计所有去噪器（生成样本 vs 该客户端训练数据）和所有分类器（成员推断）

    denoisers: 名称 -> (去噪器, 其训练数据)
    classifiers: 名称 -> (分类器, 其训练集)
    """
    result = AuditResult(summary=AuditSummary())
    for name, (denoiser, training) in denoisers.items():
        generated = sample_dataset(
            denoiser,
            cfg.samples_per_class,
            lambda y, name=name: int(make_rng(seed, "audit-sample", name, y).integers(2**63)),
            origin=0,
        )
        report = memorization_scan(generated, training, cfg.delta)
        result.memorization[name] = report
        result.summary.memorization[name] = MemorizationSummary(
            delta=report.delta, global_min=report.global_min,
            flag_count=report.flag_count, generated=len(generated),
        )
        logger.info(f"Memorization scan {name}: min distance {report.global_min:.4f}, "
                    f"{report.flag_count}/{len(generated)} flagged at δ={report.delta}")

    for name, (classifier, train) in classifiers.items():
        members, nonmembers = balanced_membership_sets(
            train, holdout, cfg.mia_size, make_rng(seed, "audit-mia", name)
        )
        report = mia_loss_threshold(classifier, members, nonmembers, cfg.mia_threshold)
        result.mia[name] = report
        result.summary.mia[name] = MiaSummary(
            tau=report.tau, accuracy=report.accuracy, best_tau=report.best_tau,
            best_accuracy=report.best_accuracy, auc=report.auc, size=report.size,
        )
        logger.info(f"MIA {name}: best accuracy {report.best_accuracy:.3f}, AUC {report.auc:.3f}")
    return result
