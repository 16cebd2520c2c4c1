"""MPCPA 客户端/服务端状态机、消息账本，以及同一基础设施上的 FedAvg 与集中式基线

通信只发生在三个屏障点：去噪器上传、去噪器包下发、分类器上传。各客户端在屏障之间
并行工作，服务端串行地按客户端编号处理上传和记账，因此结果与调度顺序无关。
"""
import asyncio
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, ProtocolError, RejectedInputError
from app.core.seeding import derive_seed
from app.models.experiments import ExperimentConfig
from app.models.messages import SERVER_ID, LedgerSummary, Message, MessageKind, client_id
from app.models.reports import SplitAccuracy
from app.services.aggregation import Ensemble
from app.services.artifact_store import ArtifactStore
from app.services.classifier import Classifier, build_classifier, train_classifier
from app.services.datagen import LabeledDataset, centroid_disparity
from app.services.decorators import monitor_performance
from app.services.diffusion import ConditionalDenoiser
from app.services.experiment_data import (
    ExperimentData,
    SyntheticPool,
    combine_training_set,
    evaluate,
    prepare_data,
)
from app.services.interfaces import BaseClient, BaseServer
from app.services.parallel_executor import ParallelExecutor

logger = logging.getLogger(__name__)

_COUNT = struct.Struct("<I")
_ENTRY = struct.Struct("<II")


class Ledger:
    """只追加的消息账本"""

    def __init__(self, messages: Iterable[Message] = ()):
        self._messages: List[Message] = list(messages)

    def record(self, sender: str, receiver: str, kind: MessageKind, payload: bytes, round: int = 0) -> Message:
        message = Message(sender=sender, receiver=receiver, kind=kind, payload_bytes=len(payload), round=round)
        self._messages.append(message)
        logger.debug(f"Ledger: {sender} -> {receiver} {kind.value} ({len(payload)} bytes, round {round})")
        return message

    @property
    def messages(self) -> Tuple[Message, ...]:
        return tuple(self._messages)

    def __len__(self) -> int:
        return len(self._messages)

    def dumps(self) -> str:
        """每行一条 JSON 记录 (sender, receiver, kind, bytes, round)"""
        return "".join(
            json.dumps({
                "sender": m.sender,
                "receiver": m.receiver,
                "kind": m.kind.value,
                "bytes": m.payload_bytes,
                "round": m.round,
            }) + "\n"
            for m in self._messages
        )

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Ledger":
        messages = []
        for line in text.splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            messages.append(Message(
                sender=record["sender"], receiver=record["receiver"], kind=MessageKind(record["kind"]),
                payload_bytes=record["bytes"], round=record["round"],
            ))
        return cls(messages)


def ledger_summary(ledger: Ledger) -> LedgerSummary:
    counts = {kind.value: 0 for kind in MessageKind}
    total_bytes = 0
    for message in ledger.messages:
        counts[message.kind.value] += 1
        total_bytes += message.payload_bytes
    return LedgerSummary(counts=counts, total=len(ledger), total_bytes=total_bytes)


def pack_denoisers(blobs: Dict[int, bytes]) -> bytes:
    """去噪器包：u32 模型数，随后按来源编号升序排列的 (u32 来源, u32 长度, 字节) 条目"""
    parts = [_COUNT.pack(len(blobs))]
    for source in sorted(blobs):
        parts.append(_ENTRY.pack(source, len(blobs[source])))
        parts.append(blobs[source])
    return b"".join(parts)


def unpack_denoisers(blob: bytes) -> Dict[int, ConditionalDenoiser]:
    try:
        (count,) = _COUNT.unpack_from(blob, 0)
        offset = _COUNT.size
        models = {}
        for _ in range(count):
            source, length = _ENTRY.unpack_from(blob, offset)
            offset += _ENTRY.size
            if offset + length > len(blob):
                raise RejectedInputError("truncated denoiser package")
            models[source] = ConditionalDenoiser.from_bytes(blob[offset:offset + length])
            offset += length
    except struct.error as e:
        raise RejectedInputError(f"truncated denoiser package: {e}")
    if offset != len(blob):
        raise RejectedInputError("trailing bytes after denoiser package")
    return models


@dataclass
class ClientState:
    """客户端 k 的本地状态：R_k、f_k、P^k、S^k、D_k、C_k"""
    k: int
    real: LabeledDataset
    denoiser: Optional[ConditionalDenoiser] = None
    package: Dict[int, ConditionalDenoiser] = field(default_factory=dict)
    synthetic: List[LabeledDataset] = field(default_factory=list)
    combined: Optional[LabeledDataset] = None
    classifier: Optional[Classifier] = None


class Client(BaseClient):
    def __init__(self, k: int, real: LabeledDataset, config: ExperimentConfig, pool: SyntheticPool):
        self.state = ClientState(k=k, real=real)
        self.config = config
        self.pool = pool

    @property
    def id(self) -> str:
        return client_id(self.state.k)

    def train_denoiser(self) -> bytes:
        blob = self.pool.denoiser_blob(self.state.k)
        self.state.denoiser = ConditionalDenoiser.from_bytes(blob)
        return blob

    def receive_package(self, blob: bytes) -> None:
        package = unpack_denoisers(blob)
        if self.state.k in package:
            raise ProtocolError(f"{self.id} received a package containing its own denoiser")
        self.state.package = package

    def train_classifier(self) -> bytes:
        k = self.state.k
        self.state.synthetic = [
            self.pool.synthesize(k, source, self.config.gen_count, denoiser)
            for source, denoiser in sorted(self.state.package.items())
        ]
        self.state.combined = combine_training_set(self.state.real, self.state.synthetic)
        self.state.classifier = train_classifier(
            self.state.combined, self.config.classifier, seed=derive_seed(self.config.seed, "classifier", k)
        )
        logger.info(f"{self.id} trained its classifier on {len(self.state.combined)} points "
                    f"({len(self.state.real)} real)")
        return self.state.classifier.to_bytes()


class ServerPhase(str, Enum):
    COLLECTING_DDPM = "collecting_ddpm"
    DISTRIBUTING = "distributing"
    COLLECTING_CLASSIFIERS = "collecting_classifiers"
    DONE = "done"


_PHASE_ORDER = list(ServerPhase)


class Server(BaseServer):
    """串行的服务端：阶段单调推进，每次收发都记入账本"""

    def __init__(self, n_clients: int, ledger: Ledger, store: Optional[ArtifactStore] = None):
        self.n_clients = n_clients
        self.ledger = ledger
        self.store = store if store is not None else ArtifactStore()
        self.phase = ServerPhase.COLLECTING_DDPM
        self.denoisers: Dict[int, bytes] = {}
        self.classifiers: Dict[int, bytes] = {}

    def _advance(self, phase: ServerPhase) -> None:
        if _PHASE_ORDER.index(phase) < _PHASE_ORDER.index(self.phase):
            raise ProtocolError(f"server cannot move from {self.phase.value} back to {phase.value}")
        if phase != self.phase:
            logger.info(f"Server phase {self.phase.value} -> {phase.value}")
        self.phase = phase

    def _expect(self, phase: ServerPhase) -> None:
        if self.phase != phase:
            raise ProtocolError(f"server is {self.phase.value}, expected {phase.value}")

    def _check_client(self, k: int, received: Dict[int, bytes]) -> None:
        if not 1 <= k <= self.n_clients:
            raise ProtocolError(f"unknown client {k}")
        if k in received:
            raise ProtocolError(f"{client_id(k)} already uploaded")

    def receive_denoiser(self, k: int, blob: bytes) -> None:
        self._expect(ServerPhase.COLLECTING_DDPM)
        self._check_client(k, self.denoisers)
        self.ledger.record(client_id(k), SERVER_ID, MessageKind.DDPM_UPLOAD, blob)
        self.denoisers[k] = blob
        self.store.register(f"denoiser-{k}", "denoiser", blob)

    def distribute(self) -> Dict[int, bytes]:
        """为每个客户端组装 P^k（除 f_k 外的所有去噪器）"""
        self._expect(ServerPhase.COLLECTING_DDPM)
        missing = [k for k in range(1, self.n_clients + 1) if k not in self.denoisers]
        if missing:
            raise ProtocolError(f"cannot distribute before all denoisers arrive; missing {missing}")
        self._advance(ServerPhase.DISTRIBUTING)
        packages = {}
        for k in range(1, self.n_clients + 1):
            package = pack_denoisers({source: blob for source, blob in self.denoisers.items() if source != k})
            self.ledger.record(SERVER_ID, client_id(k), MessageKind.DDPM_PACKAGE, package)
            packages[k] = package
        self._advance(ServerPhase.COLLECTING_CLASSIFIERS)
        return packages

    def receive_classifier(self, k: int, blob: bytes) -> None:
        self._expect(ServerPhase.COLLECTING_CLASSIFIERS)
        self._check_client(k, self.classifiers)
        self.ledger.record(client_id(k), SERVER_ID, MessageKind.CLASSIFIER_UPLOAD, blob)
        self.classifiers[k] = blob
        self.store.register(f"classifier-{k}", "classifier", blob)

    def finish(self) -> List[Classifier]:
        self._expect(ServerPhase.COLLECTING_CLASSIFIERS)
        if len(self.classifiers) != self.n_clients:
            raise ProtocolError("not every client uploaded a classifier")
        self._advance(ServerPhase.DONE)
        return [Classifier.from_bytes(self.classifiers[k]) for k in sorted(self.classifiers)]


def _check_clients(data: ExperimentData) -> None:
    if data.n_clients < 2:
        raise ConfigurationError(f"the protocol needs at least two clients, got {data.n_clients}")
    empty = [k for k in range(1, data.n_clients + 1) if len(data.client(k)) == 0]
    if empty:
        raise ConfigurationError(f"clients {empty} have no local data")


def ensemble_accuracies(ensemble: Ensemble, data: ExperimentData, prefix: str) -> Dict[str, SplitAccuracy]:
    """配置的聚合方式记为 prefix，其余方式记为 prefix/<mode>"""
    rows = {prefix: evaluate(ensemble, data)}
    for mode in ensemble.available_modes():
        rows[f"{prefix}/{mode.value}"] = evaluate(ensemble.with_mode(mode), data)
    return rows


@dataclass
class MpcpaResult:
    ensemble: Ensemble
    classifiers: List[Classifier]
    ledger: Ledger
    accuracies: Dict[str, SplitAccuracy]
    diagnostics: Dict[str, Any]
    clients: List[ClientState]
    store: ArtifactStore


@monitor_performance("protocol", "run_mpcpa")
async def run_mpcpa(config: ExperimentConfig, data: Optional[ExperimentData] = None,
                    pool: Optional[SyntheticPool] = None,
                    executor: Optional[ParallelExecutor] = None) -> MpcpaResult:
    data = data or prepare_data(config)
    _check_clients(data)
    pool = pool or SyntheticPool(config, data)
    executor = executor or ParallelExecutor()
    ledger = Ledger()
    server = Server(data.n_clients, ledger)
    clients = [Client(k, data.client(k), config, pool) for k in range(1, data.n_clients + 1)]
    logger.info(f"MPCPA run '{config.name}' with {len(clients)} clients, gen_count={config.gen_count}")

    denoisers = await executor.map(lambda c: c.train_denoiser(), clients, label="train_denoiser")
    for client, blob in zip(clients, denoisers):
        server.receive_denoiser(client.state.k, blob)

    packages = server.distribute()
    for client in clients:
        client.receive_package(packages[client.state.k])

    uploads = await executor.map(lambda c: c.train_classifier(), clients, label="train_classifier")
    for client, blob in zip(clients, uploads):
        server.receive_classifier(client.state.k, blob)
    classifiers = server.finish()

    ensemble = Ensemble(classifiers, config.aggregation.mode, config.aggregation.weights)
    accuracies = {f"B_{k}": evaluate(c, data) for k, c in enumerate(classifiers, start=1)}
    accuracies.update(ensemble_accuracies(ensemble, data, "aggregate(B)"))
    diagnostics = {
        "centroid_disparity_real": centroid_disparity([c.state.real for c in clients]),
        "centroid_disparity_combined": centroid_disparity([c.state.combined for c in clients]),
        "training_set_sizes": {client_id(c.state.k): len(c.state.combined) for c in clients},
    }
    logger.info(f"MPCPA run '{config.name}' finished, ledger total {len(ledger)}")
    return MpcpaResult(ensemble, classifiers, ledger, accuracies, diagnostics,
                       [c.state for c in clients], server.store)


def average_parameters(vectors: List[np.ndarray], weights: Optional[List[float]] = None) -> np.ndarray:
    """参数向量的（加权）均值"""
    if not vectors:
        raise RejectedInputError("nothing to average")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    return np.average(stacked, axis=0, weights=weights)


@dataclass
class FedAvgResult:
    classifier: Classifier
    ledger: Ledger
    accuracies: Dict[str, SplitAccuracy]
    store: ArtifactStore


@monitor_performance("protocol", "run_fedavg")
async def run_fedavg(config: ExperimentConfig, data: Optional[ExperimentData] = None,
                     executor: Optional[ParallelExecutor] = None,
                     initial: Optional[Classifier] = None) -> FedAvgResult:
    """每轮：广播全局参数、客户端本地训练 local_epochs 轮并上传、服务端取均值"""
    data = data or prepare_data(config)
    _check_clients(data)
    executor = executor or ParallelExecutor()
    fed = config.fedavg
    ledger = Ledger()
    ks = list(range(1, data.n_clients + 1))
    global_model = initial or build_classifier(
        config.dim, config.resolved_num_classes, config.classifier.hidden, derive_seed(config.seed, "fedavg", "init")
    )
    weights = [len(data.client(k)) for k in ks] if fed.weighted else None
    logger.info(f"FedAvg run '{config.name}': {len(ks)} clients, {fed.iters} rounds, "
                f"{fed.local_epochs} local epochs, weighted={fed.weighted}")

    for round_ in range(1, fed.iters + 1):
        broadcast = global_model.to_bytes()
        for k in ks:
            ledger.record(SERVER_ID, client_id(k), MessageKind.FEDAVG_BROADCAST, broadcast, round=round_)

        def local_update(k: int, blob: bytes = broadcast, r: int = round_) -> bytes:
            local = train_classifier(
                data.client(k), config.classifier, seed=derive_seed(config.seed, "fedavg", k, r),
                init=Classifier.from_bytes(blob), epochs=fed.local_epochs,
            )
            return local.to_bytes()

        updates = await executor.map(local_update, ks, label=f"fedavg_round_{round_}")
        for k, update in zip(ks, updates):
            ledger.record(client_id(k), SERVER_ID, MessageKind.FEDAVG_UPDATE, update, round=round_)
        params = [Classifier.from_bytes(update).network.flatten() for update in updates]
        global_model = Classifier(global_model.network.with_parameters(average_parameters(params, weights)))
        if round_ % 50 == 0 or round_ == fed.iters:
            logger.info(f"FedAvg round {round_}/{fed.iters}: validation accuracy "
                        f"{global_model.accuracy(data.validation)}")

    store = ArtifactStore()
    store.register("fedavg-global", "classifier", global_model.to_bytes())
    return FedAvgResult(global_model, ledger, {"fedavg": evaluate(global_model, data)}, store)


class CentralSource(str, Enum):
    ALL_ORIGINAL = "all_original"
    ALL_GENERATED = "all_generated"
    SINGLE_CLIENT = "single_client"
    CLIENT_PLUS_GENERATED = "client_plus_generated"


def parse_source(source: Union[str, Tuple[str, Optional[int]]]) -> Tuple[CentralSource, Optional[int]]:
    """接受 "all_original"、"single_client:2" 或 ("single_client", 2)"""
    if isinstance(source, tuple):
        name, k = source
    else:
        name, _, index = str(source).partition(":")
        k = None
        if index:
            try:
                k = int(index)
            except ValueError:
                raise RejectedInputError(f"client index must be an integer: {source!r}")
    try:
        kind = CentralSource(name)
    except ValueError:
        raise RejectedInputError(f"unknown centralized source: {source!r}")
    needs_client = kind in (CentralSource.SINGLE_CLIENT, CentralSource.CLIENT_PLUS_GENERATED)
    if needs_client and k is None:
        raise RejectedInputError(f"{kind.value} needs a client index, e.g. {kind.value}:1")
    if not needs_client and k is not None:
        raise RejectedInputError(f"{kind.value} takes no client index")
    return kind, k


def source_label(kind: CentralSource, k: Optional[int]) -> str:
    return {
        CentralSource.ALL_ORIGINAL: "all_original",
        CentralSource.ALL_GENERATED: "all_generated",
        CentralSource.SINGLE_CLIENT: f"A_{k}",
        CentralSource.CLIENT_PLUS_GENERATED: f"B_{k}",
    }[kind]


@dataclass
class CentralizedResult:
    label: str
    classifier: Classifier
    train: LabeledDataset
    accuracies: Dict[str, SplitAccuracy]


def centralized_training_set(kind: CentralSource, k: Optional[int], data: ExperimentData,
                             pool: SyntheticPool, gen_count: int) -> Tuple[LabeledDataset, Tuple]:
    """返回训练集与分类器种子键；A_k 与 B_k 使用客户端 k 的分类器种子"""
    if kind == CentralSource.ALL_ORIGINAL:
        return LabeledDataset.concat(data.clients), ("classifier", "central", kind.value)
    if kind == CentralSource.ALL_GENERATED:
        parts = [pool.synthesize("central", source, gen_count) for source in range(1, data.n_clients + 1)]
        return LabeledDataset.concat(parts), ("classifier", "central", kind.value)
    real = data.client(k)
    if kind == CentralSource.SINGLE_CLIENT:
        return combine_training_set(real, []), ("classifier", k)
    return combine_training_set(real, pool.synthetic_for(k, gen_count)), ("classifier", k)


@monitor_performance("protocol", "run_centralized")
async def run_centralized(config: ExperimentConfig, source: Union[str, Tuple[str, Optional[int]]],
                          data: Optional[ExperimentData] = None, pool: Optional[SyntheticPool] = None,
                          gen_count: Optional[int] = None) -> CentralizedResult:
    """集中式参考：在汇总的指定数据上训练一个分类器，不产生任何消息"""
    kind, k = parse_source(source)
    data = data or prepare_data(config)
    if k is not None and not 1 <= k <= data.n_clients:
        raise RejectedInputError(f"client {k} outside 1..{data.n_clients}")
    pool = pool or SyntheticPool(config, data)
    gen_count = config.gen_count if gen_count is None else gen_count
    label = source_label(kind, k)

    def train() -> Tuple[LabeledDataset, Classifier]:
        train_set, seed_key = centralized_training_set(kind, k, data, pool, gen_count)
        if len(train_set) == 0:
            raise ConfigurationError(f"{label} has no training data (gen_count={gen_count})")
        return train_set, train_classifier(train_set, config.classifier, seed=derive_seed(config.seed, *seed_key))

    train_set, classifier = await asyncio.to_thread(train)
    logger.info(f"Centralized {label}: trained on {len(train_set)} points")
    return CentralizedResult(label, classifier, train_set, {label: evaluate(classifier, data)})
