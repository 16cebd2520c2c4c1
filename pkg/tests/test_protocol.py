import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import ConfigurationError, ProtocolError, RejectedInputError
from app.core.seeding import derive_seed
from app.models.messages import SERVER_ID, Message, MessageKind
from app.services.classifier import build_classifier, train_classifier
from app.services.diffusion import TIME_EMBED_DIM, ConditionalDenoiser, build_linear_schedule
from app.services.experiment_data import ExperimentData, SyntheticPool, prepare_data
from app.services.nn_core import DenseLayer, DenseNetwork
from app.services.parallel_executor import ParallelExecutor
from app.services.protocol import (
    Client,
    Ledger,
    Server,
    ServerPhase,
    average_parameters,
    ledger_summary,
    pack_denoisers,
    parse_source,
    run_centralized,
    run_fedavg,
    run_mpcpa,
    unpack_denoisers,
)
from tests.conftest import make_config


def denoiser_blob(fill: float = 0.0) -> bytes:
    width = 2 + TIME_EMBED_DIM + 2
    body = DenseNetwork([DenseLayer(np.full((2, width), fill), np.zeros(2))])
    return ConditionalDenoiser(body, 2, 2, build_linear_schedule(4, 0.01, 0.2)).to_bytes()


class TestLedger:
    def test_empty_summary_is_all_zero(self):
        summary = ledger_summary(Ledger())
        assert summary.total == 0
        assert summary.total_bytes == 0
        assert set(summary.counts.values()) == {0}
        assert set(summary.counts) == {kind.value for kind in MessageKind}

    def test_jsonl_keeps_every_field(self):
        ledger = Ledger()
        ledger.record("client-1", SERVER_ID, MessageKind.DDPM_UPLOAD, b"abc")
        ledger.record(SERVER_ID, "client-2", MessageKind.FEDAVG_BROADCAST, b"", round=4)
        restored = Ledger.loads(ledger.dumps())
        assert restored.messages == ledger.messages
        assert ledger_summary(restored).total_bytes == 3

    def test_message_endpoints_must_differ(self):
        with pytest.raises(ValidationError):
            Message(sender=SERVER_ID, receiver=SERVER_ID, kind=MessageKind.DDPM_PACKAGE, payload_bytes=1)


class TestDenoiserPackage:
    def test_entries_keep_their_sources(self):
        package = pack_denoisers({3: denoiser_blob(0.5), 1: denoiser_blob()})
        models = unpack_denoisers(package)
        assert sorted(models) == [1, 3]
        assert models[3].body.layers[0].weights[0, 0] == 0.5

    def test_truncated_package(self):
        package = pack_denoisers({1: denoiser_blob()})
        with pytest.raises(RejectedInputError):
            unpack_denoisers(package[:-5])
        with pytest.raises(RejectedInputError):
            unpack_denoisers(package + b"\x01")

    def test_client_rejects_its_own_denoiser(self, benchmark_data, tiny_config):
        client = Client(2, benchmark_data, tiny_config, pool=None)
        with pytest.raises(ProtocolError):
            client.receive_package(pack_denoisers({1: denoiser_blob(), 2: denoiser_blob()}))


class TestServerPhases:
    def test_cannot_distribute_before_every_upload(self):
        server = Server(2, Ledger())
        server.receive_denoiser(1, denoiser_blob())
        with pytest.raises(ProtocolError):
            server.distribute()
        assert server.phase == ServerPhase.COLLECTING_DDPM

    def test_out_of_phase_and_duplicate_messages(self):
        server = Server(2, Ledger())
        with pytest.raises(ProtocolError):
            server.receive_classifier(1, b"")
        with pytest.raises(ProtocolError):
            server.finish()
        server.receive_denoiser(1, denoiser_blob())
        with pytest.raises(ProtocolError):
            server.receive_denoiser(1, denoiser_blob())
        with pytest.raises(ProtocolError):
            server.receive_denoiser(3, denoiser_blob())

    def test_packages_exclude_the_receivers_own_model(self):
        ledger = Ledger()
        server = Server(3, ledger)
        for k in (1, 2, 3):
            server.receive_denoiser(k, denoiser_blob(float(k)))
        packages = server.distribute()
        for k, package in packages.items():
            assert sorted(unpack_denoisers(package)) == sorted({1, 2, 3} - {k})
        assert server.phase == ServerPhase.COLLECTING_CLASSIFIERS
        with pytest.raises(ProtocolError):
            server.receive_denoiser(1, denoiser_blob())
        assert len(ledger) == 6


class TestMpcpa:
    async def test_three_clients_send_nine_messages(self, tiny_config):
        result = await run_mpcpa(tiny_config)
        summary = ledger_summary(result.ledger)
        assert summary.total == 9
        assert summary.counts["DdpmUpload"] == summary.counts["DdpmPackage"] == summary.counts["ClassifierUpload"] == 3
        assert [m.kind for m in result.ledger.messages] == (
            [MessageKind.DDPM_UPLOAD] * 3 + [MessageKind.DDPM_PACKAGE] * 3 + [MessageKind.CLASSIFIER_UPLOAD] * 3
        )
        for state in result.clients:
            assert sorted(state.package) == sorted({1, 2, 3} - {state.k})
            assert len(state.combined) == len(state.real) + 2 * 2 * tiny_config.gen_count
        assert {"B_1", "B_2", "B_3", "aggregate(B)", "aggregate(B)/vote_relative"} <= set(result.accuracies)
        assert result.store.names("denoiser") == ["denoiser-1", "denoiser-2", "denoiser-3"]

    async def test_two_clients(self):
        result = await run_mpcpa(make_config(n_clients=2))
        summary = ledger_summary(result.ledger)
        assert summary.total == 6
        assert (summary.counts["DdpmUpload"], summary.counts["DdpmPackage"], summary.counts["ClassifierUpload"]) == (2, 2, 2)

    async def test_result_does_not_depend_on_parallelism(self, tiny_config):
        serial = await run_mpcpa(tiny_config, executor=ParallelExecutor(1))
        parallel = await run_mpcpa(tiny_config, executor=ParallelExecutor(3))
        assert serial.ledger.dumps() == parallel.ledger.dumps()
        assert serial.accuracies == parallel.accuracies
        for a, b in zip(serial.classifiers, parallel.classifiers):
            assert a.to_bytes() == b.to_bytes()

    async def test_zero_generation_reproduces_local_baseline(self):
        config = make_config(gen_count=0)
        result = await run_mpcpa(config)
        for k in (1, 2, 3):
            baseline = await run_centralized(config, f"single_client:{k}")
            np.testing.assert_array_equal(result.classifiers[k - 1].network.flatten(),
                                          baseline.classifier.network.flatten())
            assert result.accuracies[f"B_{k}"] == baseline.accuracies[f"A_{k}"]

    async def test_empty_client_rejected_before_any_message(self, tiny_config):
        data = prepare_data(tiny_config)
        empty = data.clients[0].subset([])
        broken = ExperimentData(data.train, data.validation, data.test, [empty, *data.clients[1:]])
        with pytest.raises(ConfigurationError):
            await run_mpcpa(tiny_config, data=broken)


class TestFedAvg:
    def test_opposite_vectors_average_to_zero(self, rng):
        theta = rng.normal(size=7)
        np.testing.assert_array_equal(average_parameters([theta, -theta]), np.zeros(7))

    def test_weighted_average(self):
        np.testing.assert_allclose(average_parameters([np.ones(2), np.zeros(2)], [3, 1]), [0.75, 0.75])

    async def test_message_count(self):
        config = make_config(fedavg={"iters": 200}, classifier={"hidden": [], "epochs": 1})
        result = await run_fedavg(config)
        summary = ledger_summary(result.ledger)
        assert summary.total == 1200
        assert summary.counts["FedAvgBroadcast"] == summary.counts["FedAvgUpdate"] == 600
        assert max(m.round for m in result.ledger.messages) == 200

    async def test_identical_clients_without_local_training_is_a_fixpoint(self):
        config = make_config(n_clients=2, fedavg={"iters": 1, "local_epochs": 0})
        data = prepare_data(config)
        same = ExperimentData(data.train, data.validation, data.test, [data.clients[0], data.clients[0]])
        initial = build_classifier(2, 2, config.classifier.hidden, seed=1)
        result = await run_fedavg(config, data=same, initial=initial)
        np.testing.assert_array_equal(result.classifier.network.flatten(), initial.network.flatten())
        assert len(result.ledger) == 4


class TestCentralized:
    async def test_all_original_pools_every_shard(self, tiny_config):
        data = prepare_data(tiny_config)
        result = await run_centralized(tiny_config, "all_original", data=data)
        assert len(result.train) == sum(len(c) for c in data.clients)
        assert "all_original" in result.accuracies

    async def test_client_plus_generated_size(self, tiny_config):
        data = prepare_data(tiny_config)
        result = await run_centralized(tiny_config, "client_plus_generated:2", data=data)
        expected = len(data.client(2)) + (3 - 1) * 2 * tiny_config.gen_count
        assert len(result.train) == expected

    async def test_single_client_equals_direct_training(self, tiny_config):
        data = prepare_data(tiny_config)
        result = await run_centralized(tiny_config, ("single_client", 1), data=data)
        direct = train_classifier(data.client(1), tiny_config.classifier, seed=derive_seed(tiny_config.seed, "classifier", 1))
        assert result.classifier.to_bytes() == direct.to_bytes()

    async def test_generated_pool_shared_with_protocol(self, tiny_config):
        data = prepare_data(tiny_config)
        pool = SyntheticPool(tiny_config, data)
        mpcpa = await run_mpcpa(tiny_config, data=data, pool=pool)
        central = await run_centralized(tiny_config, "client_plus_generated:1", data=data, pool=pool)
        assert central.classifier.to_bytes() == mpcpa.classifiers[0].to_bytes()

    async def test_all_generated_needs_samples(self):
        with pytest.raises(ConfigurationError):
            await run_centralized(make_config(gen_count=0), "all_generated")

    @pytest.mark.parametrize("source", ["everything", "single_client", "all_original:1", "single_client:x"])
    def test_unknown_sources(self, source):
        with pytest.raises(RejectedInputError):
            parse_source(source)

    async def test_client_index_out_of_range(self, tiny_config):
        with pytest.raises(RejectedInputError):
            await run_centralized(tiny_config, "single_client:4")
