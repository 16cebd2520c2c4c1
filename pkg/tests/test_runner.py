import json

import pandas as pd
import pytest

from app.core.config import load_experiment_config
from app.core.errors import ArtifactError, RejectedInputError
from app.services import experiment_runner
from app.services.experiment_runner import Arm, cmd_audit, cmd_run, execute_arm, parse_arm
from app.services.report_writer import build_comparison, cmd_report, load_run_report


class TestParseArm:
    @pytest.mark.parametrize("text, expected", [
        ("mpcpa", Arm("mpcpa")),
        ("centralized:single_client:2", Arm("centralized", source="single_client:2")),
        ("gen_count_sweep:0,5,10", Arm("gen_count_sweep", counts=(0, 5, 10))),
    ])
    def test_valid(self, text, expected):
        assert parse_arm(text) == expected
        assert str(parse_arm(text)) == text

    @pytest.mark.parametrize("text", ["boosting", "mpcpa:1", "centralized:nothing", "gen_count_sweep:",
                                      "gen_count_sweep:1,x", "gen_count_sweep:-1"])
    def test_invalid(self, text):
        with pytest.raises(RejectedInputError):
            parse_arm(text)

    def test_slug_is_path_safe(self):
        assert parse_arm("gen_count_sweep:0,5").slug == "gen_count_sweep-0-5"


class TestArms:
    async def test_mpcpa(self, tiny_config):
        outcome = await execute_arm(tiny_config, "mpcpa")
        assert outcome.report.ledger.total == 9
        assert outcome.report.headline == ["aggregate(B)"]
        assert len(outcome.tables["predictions_test"]) == len(outcome.data.test)

    async def test_fedavg(self, tiny_config):
        outcome = await execute_arm(tiny_config, "fedavg")
        assert outcome.report.ledger.total == 2 * 3 * tiny_config.fedavg.iters
        assert set(outcome.report.accuracies) == {"fedavg"}

    async def test_centralized_sends_nothing(self, tiny_config):
        outcome = await execute_arm(tiny_config, "centralized:all_original")
        assert outcome.report.ledger is None
        assert outcome.report.diagnostics["train_size"] == sum(len(c) for c in outcome.data.clients)

    async def test_ablation_grid_rows(self, tiny_config):
        outcome = await execute_arm(tiny_config, "ablation_grid")
        names = set(outcome.report.accuracies)
        expected = {"all_original", "all_generated", "aggregate(A)", "aggregate(B)"}
        expected |= {f"{group}_{k}" for group in "AB" for k in (1, 2, 3)}
        assert expected <= names
        assert [c.client for c in outcome.report.clients] == [1, 2, 3]
        for diagnostic in outcome.report.clients:
            k = diagnostic.client
            assert diagnostic.improvement == pytest.approx(
                outcome.report.accuracies[f"B_{k}"].test - outcome.report.accuracies[f"A_{k}"].test
            )

    async def test_zero_count_sweep_matches_local_baselines(self, tiny_config):
        sweep = await execute_arm(tiny_config, "gen_count_sweep:0")
        grid = await execute_arm(tiny_config, "ablation_grid")
        for k in (1, 2, 3):
            assert sweep.report.accuracies[f"B_{k}@0"] == grid.report.accuracies[f"A_{k}"]
        assert sweep.report.accuracies["aggregate(B)@0"] == grid.report.accuracies["aggregate(A)"]

    async def test_sweep_rows_per_count(self, tiny_config):
        outcome = await execute_arm(tiny_config, "gen_count_sweep:0,5")
        assert outcome.report.headline == ["aggregate(B)@0", "aggregate(B)@5"]
        assert "B_2@5" in outcome.report.accuracies

    async def test_audit(self, tiny_config):
        outcome = await execute_arm(tiny_config, "audit")
        audits = outcome.report.audits
        assert sorted(audits.memorization) == ["denoiser-1", "denoiser-2", "denoiser-3"]
        assert set(audits.mia) == {
            "B_1", "B_2", "B_3", "A_1", "A_2", "A_3", "all_original", "all_generated", "fedavg",
        }
        assert outcome.report.ledger.total == 9
        assert outcome.report.ledgers["fedavg"].total == 2 * 3 * tiny_config.fedavg.iters
        assert {"A_1", "fedavg"} <= set(outcome.report.accuracies)
        assert "fedavg-global" in outcome.store.names("classifier")
        assert all(0.5 <= mia.best_accuracy <= 1.0 for mia in audits.mia.values())
        assert "memorization_denoiser-1" in outcome.tables

    async def test_bvc(self, tiny_config):
        outcome = await execute_arm(tiny_config, "bvc")
        bvc = outcome.report.bvc
        assert (bvc.trials, bvc.learners, bvc.samples) == (2, 3, len(outcome.data.test))
        assert bvc.reconstruction_residual <= 1e-10 * max(1.0, bvc.ensemble_mse)
        assert set(outcome.report.accuracies) == {"aggregate(B)#1", "aggregate(B)#2"}
        assert sorted(outcome.report.ledgers) == ["mpcpa#1", "mpcpa#2"]
        assert all(summary.total == 9 for summary in outcome.report.ledgers.values())


class TestRunDirectory:
    async def test_layout(self, tiny_config, tmp_path):
        result = await cmd_run(tiny_config, "mpcpa", tmp_path / "runs")
        run_dir = result.run_dir
        assert run_dir.name == "tiny__mpcpa"
        for relative in ("config.yaml", "report.json", "report.txt", "ledger.jsonl", "run.log",
                         "artifacts/manifest.json", "data/client-1.txt", "data/test.txt",
                         "tables/predictions_test.csv"):
            assert (run_dir / relative).is_file(), relative
        assert len((run_dir / "ledger.jsonl").read_text().splitlines()) == 9
        report = load_run_report(run_dir)
        assert "report.json" in report.artifacts
        assert report.accuracies == result.report.accuracies

    async def test_same_seed_same_report(self, tiny_config, tmp_path):
        first = await cmd_run(tiny_config, "mpcpa", tmp_path / "a")
        second = await cmd_run(tiny_config, "mpcpa", tmp_path / "b")
        assert load_run_report(first.run_dir).deterministic_json() == load_run_report(second.run_dir).deterministic_json()
        assert (first.run_dir / "ledger.jsonl").read_bytes() == (second.run_dir / "ledger.jsonl").read_bytes()

    async def test_failure_leaves_nothing_behind(self, tiny_config, tmp_path, mocker):
        mocker.patch.object(experiment_runner, "persist_outcome", side_effect=OSError("disk full"))
        with pytest.raises(OSError):
            await cmd_run(tiny_config, "centralized:all_original", tmp_path / "runs")
        assert list((tmp_path / "runs").iterdir()) == []

    async def test_rerun_replaces_directory(self, tiny_config, tmp_path):
        await cmd_run(tiny_config, "centralized:all_original", tmp_path)
        (tmp_path / "tiny__centralized-all_original" / "stale.txt").write_text("old")
        result = await cmd_run(tiny_config, "centralized:all_original", tmp_path)
        assert not (result.run_dir / "stale.txt").exists()
        assert [p.name for p in tmp_path.iterdir()] == ["tiny__centralized-all_original"]

    async def test_in_memory_run(self, tiny_config):
        result = await cmd_run(tiny_config, "centralized:single_client:1")
        assert result.run_dir is None
        assert "wall_clock_seconds" in result.report.timing


class TestAuditCommand:
    async def test_audit_existing_run(self, tiny_config, tmp_path):
        result = await cmd_run(tiny_config, "mpcpa", tmp_path)
        summary = cmd_audit(result.run_dir)
        assert sorted(summary.mia) == ["classifier-1", "classifier-2", "classifier-3"]
        assert sorted(summary.memorization) == ["denoiser-1", "denoiser-2", "denoiser-3"]
        saved = json.loads((result.run_dir / "audit.json").read_text())
        assert saved["mia"]["classifier-1"]["size"] == summary.mia["classifier-1"].size
        assert (result.run_dir / "tables" / "mia_classifier-1.csv").is_file()

    async def test_reaudit_covers_local_and_federated_models(self, tiny_config, tmp_path):
        result = await cmd_run(tiny_config, "audit", tmp_path)
        summary = cmd_audit(result.run_dir)
        assert {"central-A_1", "central-A_3", "central-all_original", "fedavg-global"} <= set(summary.mia)

    def test_missing_run(self, tmp_path):
        with pytest.raises(ArtifactError):
            cmd_audit(tmp_path)


class TestReport:
    async def test_comparison_across_runs(self, tiny_config, tmp_path):
        mpcpa = await cmd_run(tiny_config, "mpcpa", tmp_path / "runs")
        fedavg = await cmd_run(tiny_config, "fedavg", tmp_path / "runs")
        tables = cmd_report([mpcpa.run_dir, fedavg.run_dir], tmp_path / "out")
        rows = tables.comparison.set_index("method")
        assert rows.loc["aggregate(B)", "messages"] == 9
        assert rows.loc["fedavg", "messages"] == 2 * 3 * tiny_config.fedavg.iters
        assert rows.loc["aggregate(B)", "test"] == mpcpa.report.accuracies["aggregate(B)"].test
        saved = pd.read_csv(tmp_path / "out" / "comparison.csv")
        assert list(saved["method"]) == ["aggregate(B)", "fedavg"]
        assert (tmp_path / "out" / "communication.csv").is_file()
        assert "methods" in (tmp_path / "out" / "comparison.txt").read_text()

    async def test_communication_lists_every_protocol_of_a_run(self, tiny_config, tmp_path):
        run = await cmd_run(tiny_config, "audit", tmp_path)
        tables = build_comparison([run.run_dir])
        totals = dict(zip(tables.communication["ledger"], tables.communication["total"]))
        assert totals == {"audit": 9, "fedavg": 2 * 3 * tiny_config.fedavg.iters}
        text = (run.run_dir / "report.txt").read_text()
        assert f"communication [fedavg]: total={2 * 3 * tiny_config.fedavg.iters}" in text

    async def test_detail_lists_every_row(self, tiny_config, tmp_path):
        run = await cmd_run(tiny_config, "mpcpa", tmp_path)
        tables = build_comparison([run.run_dir], detail=True)
        assert set(tables.comparison["method"]) == set(run.report.accuracies)

    def test_missing_report(self, tmp_path):
        with pytest.raises(ArtifactError):
            build_comparison([tmp_path])

    def test_no_runs(self):
        with pytest.raises(RejectedInputError):
            build_comparison([])


@pytest.mark.slow
async def test_label_skew_ensemble_beats_local_training():
    ensemble, local, enriched = [], [], []
    for seed in range(5):
        config = load_experiment_config("experiments/label_skew.yaml", {"seed": seed})
        outcome = await execute_arm(config, "ablation_grid", parallelism=3)
        accuracies = outcome.report.accuracies
        ensemble.append(accuracies["aggregate(B)"].test)
        local += [accuracies[f"A_{k}"].test for k in (1, 2, 3)]
        enriched += [accuracies[f"B_{k}"].test for k in (1, 2, 3)]
    assert sum(ensemble) / len(ensemble) >= sum(local) / len(local)
    assert sum(enriched) / len(enriched) >= sum(local) / len(local)
