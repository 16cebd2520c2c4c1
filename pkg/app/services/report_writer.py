"""运行报告的文本渲染，以及跨运行的对比表和通信统计表"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Union

import pandas as pd
from pydantic import ValidationError

from app.core.errors import ArtifactError, RejectedInputError
from app.models.messages import MessageKind
from app.models.reports import RunReport

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
SPLITS = ("validation", "test", "external")


def report_json(report: RunReport) -> str:
    return json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def load_run_report(run_dir: Union[str, Path]) -> RunReport:
    path = Path(run_dir) / REPORT_JSON
    try:
        return RunReport.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArtifactError(path, "report not found")
    except ValidationError as e:
        raise ArtifactError(path, f"corrupt report: {e.errors()[0]['msg']}")


def accuracy_table(report: RunReport, rows: Optional[Iterable[str]] = None) -> pd.DataFrame:
    names = list(rows) if rows is not None else list(report.accuracies)
    records = []
    for name in names:
        accuracy = report.accuracies[name]
        records.append({"method": name, **{split: getattr(accuracy, split) for split in SPLITS}})
    frame = pd.DataFrame.from_records(records, columns=["method", *SPLITS])
    return frame.dropna(axis=1, how="all")


def render_report_text(report: RunReport) -> str:
    """人类可读的运行摘要：准确率表、通信统计、审计和 BVC 分解"""
    lines = [f"arm: {report.arm}", f"experiment: {report.config.get('name', '')}", ""]
    if report.accuracies:
        lines += ["accuracy", accuracy_table(report).to_string(index=False), ""]
    ledgers = dict(report.ledgers)
    if report.ledger is not None:
        ledgers = {report.arm: report.ledger, **ledgers}
    for name, summary in ledgers.items():
        counts = ", ".join(f"{kind}={count}" for kind, count in summary.counts.items() if count)
        lines.append(f"communication [{name}]: total={summary.total} bytes={summary.total_bytes} ({counts})")
    if ledgers:
        lines.append("")
    if report.clients:
        frame = pd.DataFrame([c.model_dump() for c in report.clients])
        lines += ["per-client improvement (B_k - A_k, test)", frame.to_string(index=False), ""]
    if report.audits is not None:
        for name, mem in report.audits.memorization.items():
            lines.append(f"memorization [{name}]: min distance {mem.global_min:.6f}, "
                         f"{mem.flag_count}/{mem.generated} flagged at delta={mem.delta}")
        for name, mia in report.audits.mia.items():
            lines.append(f"mia [{name}]: accuracy {mia.accuracy:.4f} at tau={mia.tau:.6f}, "
                         f"best {mia.best_accuracy:.4f}, auc {mia.auc:.4f} (m={mia.size})")
        lines.append("")
    if report.bvc is not None:
        b = report.bvc
        lines.append(f"bvc: bias^2={b.bias_sq:.6g} var={b.variance:.6g} covar={b.covariance:.6g} "
                     f"mse={b.ensemble_mse:.6g} residual={b.reconstruction_residual:.3g} "
                     f"(M={b.learners}, R={b.trials}, N={b.samples})")
    return "\n".join(lines).rstrip() + "\n"


@dataclass
class ComparisonTables:
    comparison: pd.DataFrame
    communication: pd.DataFrame

    def to_text(self) -> str:
        parts = ["methods", self.comparison.to_string(index=False)]
        if not self.communication.empty:
            parts += ["", "communication", self.communication.to_string(index=False)]
        return "\n".join(parts) + "\n"


def _ledger_row(run: str, arm: str, name: str, summary) -> dict:
    return {
        "run": run,
        "arm": arm,
        "ledger": name,
        **{kind.value: summary.counts.get(kind.value, 0) for kind in MessageKind},
        "total": summary.total,
        "total_bytes": summary.total_bytes,
    }


def build_comparison(run_dirs: List[Union[str, Path]], detail: bool = False) -> ComparisonTables:
    """方法 × 评估集的对比表（附消息数与字节数列），以及逐账本的通信统计表

    detail 为假时每个运行只列出其主要方法行。
    """
    if not run_dirs:
        raise RejectedInputError("no run directories given")
    method_rows, ledger_rows = [], []
    for run_dir in run_dirs:
        report = load_run_report(run_dir)
        run = Path(run_dir).name
        rows = list(report.accuracies) if detail or not report.headline else report.headline
        messages = report.ledger.total if report.ledger is not None else None
        total_bytes = report.ledger.total_bytes if report.ledger is not None else None
        for name in rows:
            accuracy = report.accuracies[name]
            method_rows.append({
                "run": run,
                "arm": report.arm,
                "method": name,
                **{split: getattr(accuracy, split) for split in SPLITS},
                "messages": messages,
                "bytes": total_bytes,
            })
        if report.ledger is not None:
            ledger_rows.append(_ledger_row(run, report.arm, report.arm, report.ledger))
        for name, summary in report.ledgers.items():
            ledger_rows.append(_ledger_row(run, report.arm, name, summary))
    comparison = pd.DataFrame(method_rows, columns=["run", "arm", "method", *SPLITS, "messages", "bytes"])
    communication = pd.DataFrame(
        ledger_rows,
        columns=["run", "arm", "ledger", *[kind.value for kind in MessageKind], "total", "total_bytes"],
    )
    return ComparisonTables(comparison, communication)


def cmd_report(run_dirs: List[Union[str, Path]], output_dir: Optional[Union[str, Path]] = None,
               detail: bool = False) -> ComparisonTables:
    """汇总多个运行目录；给定 output_dir 时写出 comparison.txt / comparison.csv / communication.csv"""
    tables = build_comparison(run_dirs, detail)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(tables.to_text(), encoding="utf-8")
        tables.comparison.to_csv(out / "comparison.csv", index=False)
        tables.communication.to_csv(out / "communication.csv", index=False)
        logger.info(f"Comparison of {len(run_dirs)} runs written to {out}")
    return tables
