"""实验运行器：执行各实验臂，汇总为 RunReport，并原子地写出运行目录"""
import asyncio
import json
import logging
import os
import re
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.core.config import config_to_dict, config_to_yaml, load_experiment_config
from app.core.errors import ArtifactError, ConfigurationError, ProtocolError, RejectedInputError
from app.core.logging import attach_run_log, detach_run_log
from app.core.seeding import derive_seed
from app.models.experiments import MAX_SEED, ExperimentConfig
from app.models.reports import AuditSummary, ClientDiagnostic, RunReport, SplitAccuracy
from app.services.aggregation import Ensemble, bvc_from_probabilities, prediction_table
from app.services.artifact_store import ArtifactStore
from app.services.classifier import Classifier
from app.services.datagen import LabeledDataset, centroid_disparity
from app.services.diffusion import ConditionalDenoiser
from app.services.experiment_data import ExperimentData, SyntheticPool, prepare_data
from app.services.parallel_executor import ParallelExecutor
from app.services.privacy_audit import AuditResult, run_privacy_audit
from app.services.protocol import (
    CentralizedResult,
    Ledger,
    ensemble_accuracies,
    ledger_summary,
    parse_source,
    run_centralized,
    run_fedavg,
    run_mpcpa,
)
from app.services.report_writer import render_report_text, report_json

logger = logging.getLogger(__name__)

ARM_KINDS = ("mpcpa", "fedavg", "centralized", "ablation_grid", "gen_count_sweep", "audit", "bvc")
ARM_USAGE = {
    "mpcpa": "mpcpa",
    "fedavg": "fedavg",
    "centralized": "centralized:<all_original|all_generated|single_client:k|client_plus_generated:k>",
    "ablation_grid": "ablation_grid",
    "gen_count_sweep": "gen_count_sweep:<c1,c2,...>",
    "audit": "audit",
    "bvc": "bvc",
}


@dataclass(frozen=True)
class Arm:
    kind: str
    source: Optional[str] = None
    counts: Tuple[int, ...] = ()

    def __str__(self) -> str:
        if self.kind == "centralized":
            return f"centralized:{self.source}"
        if self.kind == "gen_count_sweep":
            return "gen_count_sweep:" + ",".join(str(c) for c in self.counts)
        return self.kind

    @property
    def slug(self) -> str:
        return str(self).replace(":", "-").replace(",", "-")


def parse_arm(text: Union[str, Arm]) -> Arm:
    if isinstance(text, Arm):
        return text
    kind, _, rest = str(text).strip().partition(":")
    if kind not in ARM_KINDS:
        raise RejectedInputError(f"unknown arm {text!r}; expected one of {', '.join(ARM_USAGE.values())}")
    if kind == "centralized":
        kind_name, k = parse_source(rest)
        return Arm(kind, source=kind_name.value if k is None else f"{kind_name.value}:{k}")
    if kind == "gen_count_sweep":
        try:
            counts = tuple(int(c) for c in rest.split(",") if c.strip())
        except ValueError:
            raise RejectedInputError(f"generated counts must be integers: {rest!r}")
        if not counts or any(c < 0 for c in counts):
            raise RejectedInputError("gen_count_sweep needs a non-empty list of nonnegative counts")
        return Arm(kind, counts=counts)
    if rest:
        raise RejectedInputError(f"arm {kind} takes no argument")
    return Arm(kind)


@dataclass
class RunOutcome:
    report: RunReport
    data: ExperimentData
    store: ArtifactStore = field(default_factory=ArtifactStore)
    ledger: Optional[Ledger] = None
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)


def _new_report(config: ExperimentConfig, arm: Arm, **kwargs) -> RunReport:
    return RunReport(arm=str(arm), config=config_to_dict(config), **kwargs)


def _check_ledger_total(ledger: Ledger, expected: int, what: str) -> None:
    if len(ledger) != expected:
        raise ProtocolError(f"{what} ledger recorded {len(ledger)} messages, expected {expected}")


def _names(prefix: str, n: int) -> List[str]:
    return [f"{prefix}_{k}" for k in range(1, n + 1)]


async def _pretrain_denoisers(config: ExperimentConfig, data: ExperimentData, pool: SyntheticPool,
                              executor: ParallelExecutor) -> None:
    await executor.map(pool.denoiser_blob, list(range(1, data.n_clients + 1)), label="train_denoiser")


async def _arm_mpcpa(config, arm, data, pool, executor) -> RunOutcome:
    result = await run_mpcpa(config, data, pool, executor)
    _check_ledger_total(result.ledger, 3 * data.n_clients, "MPCPA")
    report = _new_report(
        config, arm,
        accuracies=result.accuracies,
        headline=["aggregate(B)"],
        ledger=ledger_summary(result.ledger),
        diagnostics=result.diagnostics,
    )
    tables = {}
    if len(data.test):
        tables["predictions_test"] = prediction_table(
            result.ensemble.prediction_set(data.test.points), names=_names("B", data.n_clients)
        )
    return RunOutcome(report, data, result.store, result.ledger, tables)


async def _arm_fedavg(config, arm, data, pool, executor) -> RunOutcome:
    result = await run_fedavg(config, data, executor)
    _check_ledger_total(result.ledger, 2 * data.n_clients * config.fedavg.iters, "FedAvg")
    report = _new_report(
        config, arm,
        accuracies=result.accuracies,
        headline=["fedavg"],
        ledger=ledger_summary(result.ledger),
    )
    return RunOutcome(report, data, result.store, result.ledger)


def _register_central(store: ArtifactStore, result: CentralizedResult) -> None:
    store.register(f"central-{result.label}", "classifier", result.classifier.to_bytes())


async def _arm_centralized(config, arm, data, pool, executor) -> RunOutcome:
    result = await run_centralized(config, arm.source, data, pool)
    store = ArtifactStore()
    _register_central(store, result)
    report = _new_report(
        config, arm,
        accuracies=result.accuracies,
        headline=[result.label],
        diagnostics={"train_size": len(result.train)},
    )
    return RunOutcome(report, data, store)


async def _central_rows(config, data, pool, sources, gen_count=None) -> Dict[str, CentralizedResult]:
    results = {}
    for source in sources:
        result = await run_centralized(config, source, data, pool, gen_count=gen_count)
        results[result.label] = result
    return results


async def _arm_ablation_grid(config, arm, data, pool, executor) -> RunOutcome:
    """全部原始、全部生成、A_1..A_n、B_1..B_n 以及两组集成，共享同一批种子"""
    n = data.n_clients
    sources = ["all_original"]
    if config.gen_count > 0:
        await _pretrain_denoisers(config, data, pool, executor)
        sources.append("all_generated")
    else:
        logger.warning("gen_count is 0, skipping the all_generated row")
    sources += [f"single_client:{k}" for k in range(1, n + 1)]
    sources += [f"client_plus_generated:{k}" for k in range(1, n + 1)]
    results = await _central_rows(config, data, pool, sources)

    accuracies: Dict[str, SplitAccuracy] = {}
    for result in results.values():
        accuracies.update(result.accuracies)
    for group in ("A", "B"):
        ensemble = Ensemble([results[name].classifier for name in _names(group, n)],
                            config.aggregation.mode, config.aggregation.weights)
        accuracies.update(ensemble_accuracies(ensemble, data, f"aggregate({group})"))

    clients = []
    for k in range(1, n + 1):
        a, b = accuracies[f"A_{k}"].test, accuracies[f"B_{k}"].test
        clients.append(ClientDiagnostic(
            client=k,
            real_size=len(data.client(k)),
            improvement=None if a is None or b is None else b - a,
        ))
    store = ArtifactStore()
    for result in results.values():
        _register_central(store, result)
    for k in pool.trained_clients():
        store.register(f"denoiser-{k}", "denoiser", pool.denoiser_blob(k))

    headline = [name for name in ("all_original", "all_generated") if name in accuracies]
    headline += _names("A", n) + _names("B", n) + ["aggregate(A)", "aggregate(B)"]
    report = _new_report(
        config, arm,
        accuracies=accuracies,
        headline=headline,
        clients=clients,
        diagnostics={
            "centroid_disparity_real": centroid_disparity(data.clients),
            "centroid_disparity_combined": centroid_disparity([results[f"B_{k}"].train for k in range(1, n + 1)]),
        },
    )
    return RunOutcome(report, data, store)


async def _arm_gen_count_sweep(config, arm, data, pool, executor) -> RunOutcome:
    """在每个生成数量下重新训练 B_k 及其集成"""
    n = data.n_clients
    if any(c > 0 for c in arm.counts):
        await _pretrain_denoisers(config, data, pool, executor)
    accuracies: Dict[str, SplitAccuracy] = {}
    headline = []
    for count in arm.counts:
        sources = [f"client_plus_generated:{k}" for k in range(1, n + 1)]
        results = await _central_rows(config, data, pool, sources, gen_count=count)
        classifiers = []
        for k in range(1, n + 1):
            result = results[f"B_{k}"]
            accuracies[f"B_{k}@{count}"] = result.accuracies[f"B_{k}"]
            classifiers.append(result.classifier)
        ensemble = Ensemble(classifiers, config.aggregation.mode, config.aggregation.weights)
        accuracies.update(ensemble_accuracies(ensemble, data, f"aggregate(B)@{count}"))
        headline.append(f"aggregate(B)@{count}")
        logger.info(f"gen_count={count}: aggregate test accuracy {accuracies[f'aggregate(B)@{count}'].test}")
    report = _new_report(config, arm, accuracies=accuracies, headline=headline,
                         diagnostics={"counts": list(arm.counts)})
    return RunOutcome(report, data)


def _audit_tables(audit: AuditResult) -> Dict[str, pd.DataFrame]:
    tables = {}
    for name, report in audit.memorization.items():
        tables[f"memorization_{name}"] = pd.DataFrame([row.model_dump() for row in report.rows])
    for name, report in audit.mia.items():
        tables[f"mia_{name}"] = pd.DataFrame({
            "role": ["member"] * len(report.member_losses) + ["nonmember"] * len(report.nonmember_losses),
            "loss": report.member_losses + report.nonmember_losses,
        })
    return tables


async def _arm_audit(config, arm, data, pool, executor) -> RunOutcome:
    """MPCPA 运行后审计各去噪器的记忆情况，以及各分类器（B_k、A_k、集中式、FedAvg 全局模型）的成员推断风险"""
    outcome = await _arm_mpcpa(config, arm, data, pool, executor)
    n = data.n_clients
    sources = ["all_original"] + (["all_generated"] if config.gen_count > 0 else [])
    sources += [f"single_client:{k}" for k in range(1, n + 1)]
    central = await _central_rows(config, data, pool, sources)
    for result in central.values():
        outcome.report.accuracies.update(result.accuracies)
        _register_central(outcome.store, result)

    fedavg = await run_fedavg(config, data, executor)
    _check_ledger_total(fedavg.ledger, 2 * n * config.fedavg.iters, "FedAvg")
    outcome.report.accuracies.update(fedavg.accuracies)
    outcome.report.ledgers["fedavg"] = ledger_summary(fedavg.ledger)
    outcome.store.register("fedavg-global", "classifier", fedavg.classifier.to_bytes())

    denoisers = {f"denoiser-{k}": (pool.denoiser(k), data.client(k)) for k in range(1, n + 1)}
    classifiers = {
        f"B_{k}": (Classifier.from_bytes(outcome.store.get(f"classifier-{k}")), data.client(k))
        for k in range(1, n + 1)
    }
    classifiers.update({label: (result.classifier, result.train) for label, result in central.items()})
    classifiers["fedavg"] = (fedavg.classifier, LabeledDataset.concat(data.clients))
    audit = await asyncio.to_thread(
        run_privacy_audit, denoisers, classifiers, data.test, config.audit, derive_seed(config.seed, "audit")
    )
    outcome.report.audits = audit.summary
    outcome.report.headline = ["aggregate(B)", *central, "fedavg"]
    outcome.tables.update(_audit_tables(audit))
    return outcome


async def _arm_bvc(config, arm, data, pool, executor) -> RunOutcome:
    """R 次训练集重抽下的集成误差分解，评估集固定为基础运行的测试集"""
    evaluation = data.test
    if len(evaluation) == 0:
        raise ConfigurationError("bvc needs a non-empty test split")
    prob_runs = []
    accuracies: Dict[str, SplitAccuracy] = {}
    ledgers = {}
    for r in range(1, config.bvc.redraws + 1):
        trial_config = config.model_copy(update={"seed": derive_seed(config.seed, "bvc", r) % MAX_SEED})
        trial = await run_mpcpa(trial_config, prepare_data(trial_config), executor=executor)
        ledgers[f"mpcpa#{r}"] = ledger_summary(trial.ledger)
        prob_runs.append(trial.ensemble.prediction_set(evaluation.points).probabilities)
        accuracies[f"aggregate(B)#{r}"] = SplitAccuracy(test=trial.ensemble.accuracy(evaluation))
    bvc = bvc_from_probabilities(np.stack(prob_runs), evaluation.labels)
    logger.info(f"BVC over {config.bvc.redraws} redraws: mse={bvc.ensemble_mse:.6f}, "
                f"residual={bvc.reconstruction_residual:.3g}")
    report = _new_report(config, arm, accuracies=accuracies, headline=list(accuracies), bvc=bvc, ledgers=ledgers)
    return RunOutcome(report, data)


_ARMS = {
    "mpcpa": _arm_mpcpa,
    "fedavg": _arm_fedavg,
    "centralized": _arm_centralized,
    "ablation_grid": _arm_ablation_grid,
    "gen_count_sweep": _arm_gen_count_sweep,
    "audit": _arm_audit,
    "bvc": _arm_bvc,
}


async def execute_arm(config: ExperimentConfig, arm: Union[str, Arm], parallelism: int = 1) -> RunOutcome:
    arm = parse_arm(arm)
    data = prepare_data(config)
    pool = SyntheticPool(config, data)
    logger.info(f"Running arm {arm} of experiment '{config.name}' (seed {config.seed})")
    return await _ARMS[arm.kind](config, arm, data, pool, ParallelExecutor(parallelism))


def _write_data(data: ExperimentData, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, subset in (("train", data.train), ("validation", data.validation), ("test", data.test),
                         ("external", data.external)):
        if subset is not None:
            subset.dump(directory / f"{name}.txt")
    for k in range(1, data.n_clients + 1):
        data.client(k).dump(directory / f"client-{k}.txt")


def persist_outcome(outcome: RunOutcome, config: ExperimentConfig, directory: Path) -> None:
    """写出运行目录：配置回显、数据、账本、模型、明细表和报告"""
    (directory / "config.yaml").write_text(config_to_yaml(config), encoding="utf-8")
    _write_data(outcome.data, directory / "data")
    if outcome.ledger is not None:
        outcome.ledger.dump(directory / "ledger.jsonl")
    outcome.store.persist(directory / "artifacts")
    if outcome.tables:
        (directory / "tables").mkdir(exist_ok=True)
        for name, table in outcome.tables.items():
            table.to_csv(directory / "tables" / f"{name}.csv", index=False)
    written = {p.relative_to(directory).as_posix() for p in directory.rglob("*") if p.is_file()}
    outcome.report.artifacts = sorted(written | {"report.json", "report.txt"})
    (directory / "report.json").write_text(report_json(outcome.report), encoding="utf-8")
    (directory / "report.txt").write_text(render_report_text(outcome.report), encoding="utf-8")


def _promote(staging: Path, final: Path) -> None:
    """用暂存目录替换目标目录"""
    if final.exists():
        retired = final.with_name(f".{final.name}.old")
        shutil.rmtree(retired, ignore_errors=True)
        os.replace(final, retired)
        os.replace(staging, final)
        shutil.rmtree(retired, ignore_errors=True)
    else:
        os.replace(staging, final)


@dataclass
class RunResult:
    report: RunReport
    run_dir: Optional[Path] = None


async def cmd_run(config: ExperimentConfig, arm: Union[str, Arm], output_dir: Optional[Union[str, Path]] = None,
                  parallelism: int = 1) -> RunResult:
    """执行一个实验臂；给定 output_dir 时写出 <output_dir>/<name>__<arm>/

    运行目录先写入同级的临时目录，成功后再整体改名，失败时不留下任何产物。
    """
    arm = parse_arm(arm)
    started = time.perf_counter()
    if output_dir is None:
        outcome = await execute_arm(config, arm, parallelism)
        outcome.report.timing["wall_clock_seconds"] = time.perf_counter() - started
        return RunResult(outcome.report)

    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    final = root / f"{config.name}__{arm.slug}"
    staging = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=root))
    handler = attach_run_log(staging)
    try:
        outcome = await execute_arm(config, arm, parallelism)
        outcome.report.timing["wall_clock_seconds"] = time.perf_counter() - started
        persist_outcome(outcome, config, staging)
    except BaseException:
        detach_run_log(handler)
        shutil.rmtree(staging, ignore_errors=True)
        raise
    detach_run_log(handler)
    _promote(staging, final)
    logger.info(f"Run written to {final}")
    return RunResult(outcome.report, final)


def _load_dataset(path: Path) -> LabeledDataset:
    if not path.exists():
        raise ArtifactError(path, "dataset file not found")
    return LabeledDataset.load(path)


def _audit_members(name: str, clients: List[LabeledDataset]) -> LabeledDataset:
    """classifier-k、central-A_k、central-B_k 的成员取客户端 k 的真实数据，其余取全部客户端"""
    match = re.fullmatch(r"(?:classifier-|central-[AB]_)(\d+)", name)
    if match and 1 <= int(match.group(1)) <= len(clients):
        return clients[int(match.group(1)) - 1]
    return LabeledDataset.concat(clients)


def cmd_audit(run_dir: Union[str, Path]) -> AuditSummary:
    """对已持久化的运行目录重新审计，结果写入 audit.json 与 tables/"""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.yaml"
    if not config_path.exists():
        raise ArtifactError(config_path, "config echo not found")
    config = load_experiment_config(str(config_path.resolve()))
    store = ArtifactStore.load(run_dir / "artifacts")
    clients = [_load_dataset(run_dir / "data" / f"client-{k}.txt") for k in range(1, config.n_clients + 1)]
    holdout = _load_dataset(run_dir / "data" / "test.txt")

    denoisers, classifiers = {}, {}
    for name in store.names("denoiser"):
        k = int(name.rsplit("-", 1)[1])
        denoisers[name] = (ConditionalDenoiser.from_bytes(store.get(name)), clients[k - 1])
    for name in store.names("classifier"):
        classifiers[name] = (Classifier.from_bytes(store.get(name)), _audit_members(name, clients))
    if not denoisers and not classifiers:
        raise ArtifactError(run_dir / "artifacts", "no models to audit")

    audit = run_privacy_audit(denoisers, classifiers, holdout, config.audit, derive_seed(config.seed, "audit"))
    tables_dir = run_dir / "tables"
    tables_dir.mkdir(exist_ok=True)
    for name, table in _audit_tables(audit).items():
        table.to_csv(tables_dir / f"{name}.csv", index=False)
    staging = run_dir / ".audit.json.tmp"
    staging.write_text(json.dumps(audit.summary.model_dump(mode="json"), sort_keys=True, indent=2) + "\n",
                       encoding="utf-8")
    os.replace(staging, run_dir / "audit.json")
    logger.info(f"Audit of {run_dir} complete")
    return audit.summary
