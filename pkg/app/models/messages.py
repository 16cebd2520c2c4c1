from enum import Enum
from typing import Dict

from pydantic import BaseModel, ConfigDict, Field, model_validator

SERVER_ID = "server"


def client_id(k: int) -> str:
    """客户端编号从 1 开始"""
    return f"client-{k}"


class MessageKind(str, Enum):
    DDPM_UPLOAD = "DdpmUpload"
    DDPM_PACKAGE = "DdpmPackage"
    CLASSIFIER_UPLOAD = "ClassifierUpload"
    FEDAVG_BROADCAST = "FedAvgBroadcast"
    FEDAVG_UPDATE = "FedAvgUpdate"


class Message(BaseModel):
    """账本中的一条模型传输记录，只承载模型，不承载原始数据"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    sender: str
    receiver: str
    kind: MessageKind
    payload_bytes: int = Field(ge=0)
    round: int = Field(0, ge=0)

    @model_validator(mode="after")
    def validate_endpoints(self):
        if self.sender == self.receiver:
            raise ValueError("sender and receiver must differ")
        return self


class LedgerSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    counts: Dict[str, int]
    total: int
    total_bytes: int
