from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.models.messages import LedgerSummary


class ReportModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BvcReport(ReportModel):
    bias_sq: float
    variance: float
    covariance: float
    ensemble_mse: float
    reconstruction_residual: float
    learners: int
    trials: int
    samples: int


class MemorizationRow(ReportModel):
    min_distance: float
    nearest_index: int
    flagged: bool


class MemorizationReport(ReportModel):
    delta: float
    global_min: float
    flag_count: int
    rows: List[MemorizationRow]


class MIAReport(ReportModel):
    tau: float
    accuracy: float = Field(ge=0, le=1)
    best_tau: float
    best_accuracy: float = Field(ge=0, le=1)
    auc: float
    size: int
    member_losses: List[float]
    nonmember_losses: List[float]


class MemorizationSummary(ReportModel):
    delta: float
    global_min: float
    flag_count: int
    generated: int


class MiaSummary(ReportModel):
    tau: float
    accuracy: float
    best_tau: float
    best_accuracy: float
    auc: float
    size: int


class AuditSummary(ReportModel):
    memorization: Dict[str, MemorizationSummary] = Field(default_factory=dict)
    mia: Dict[str, MiaSummary] = Field(default_factory=dict)


class SplitAccuracy(ReportModel):
    """一个方法在各评估集上的准确率"""
    validation: Optional[float] = None
    test: Optional[float] = None
    external: Optional[float] = None

    @field_validator("validation", "test", "external")
    @classmethod
    def validate_range(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        return v


class ClientDiagnostic(ReportModel):
    client: int
    real_size: int
    improvement: Optional[float] = None


class RunReport(ReportModel):
    """一次运行的完整报告；timing 不参与确定性比较"""
    arm: str
    config: Dict[str, Any]
    accuracies: Dict[str, SplitAccuracy] = Field(default_factory=dict)
    headline: List[str] = Field(default_factory=list)
    ledger: Optional[LedgerSummary] = None
    # 同一实验臂中其他协议运行的账本，例如 audit 的 fedavg、bvc 每次重抽的 mpcpa#r
    ledgers: Dict[str, LedgerSummary] = Field(default_factory=dict)
    audits: Optional[AuditSummary] = None
    bvc: Optional[BvcReport] = None
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    clients: List[ClientDiagnostic] = Field(default_factory=list)
    artifacts: List[str] = Field(default_factory=list)
    timing: Dict[str, float] = Field(default_factory=dict)

    def deterministic_json(self) -> str:
        return self.model_dump_json(indent=2, exclude={"timing"})
