from pydantic import BaseModel
from enum import Enum


class LogType(str, Enum):
    EPOCH = "epoch"
    DIVERGED = "diverged"


class EpochLogEntry(BaseModel):
    epoch: int
    lr: float
    train_loss: float | None = None
    val_auc: float | None = None
    theta_grad_norm: float = 0.0
    omega_grad_norm: float = 0.0
    type: LogType = LogType.EPOCH
    message: str | None = None

    def to_line(self) -> str:
        return self.model_dump_json(exclude_none=True)
