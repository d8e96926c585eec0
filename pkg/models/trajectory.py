from pydantic import BaseModel, Field
from typing import Dict, List, Optional


class RiskTrajectory(BaseModel):
    """Per-window risk scores of one patient"""
    patient_id: str
    label: Optional[int] = None
    hours: List[float]
    logits: List[float]
    probabilities: List[float] = Field(..., description="sigmoid of the posterior-mean-path logits")
    mc_probabilities: Optional[List[float]] = Field(None, description="Probability averaged over MC posterior draws")

    @property
    def headline(self) -> List[float]:
        """MC-averaged probability when available, otherwise the mean-path probability"""
        return self.mc_probabilities if self.mc_probabilities is not None else self.probabilities


class TrajectoryMetrics(BaseModel):
    """Linear-trend quality of one trajectory"""
    slope: float = Field(..., description="Fitted slope per hour")
    intercept: float
    consistency: float = Field(..., ge=0)
    mse: float = Field(..., ge=0)
    robustness: float = Field(..., le=1)


class ImportanceRow(BaseModel):
    feature: str
    baseline_loss: float
    dropped_loss: float
    importance: float
    baseline_auc: Optional[float] = None
    dropped_auc: Optional[float] = None
    auc_drop: Optional[float] = None


class ImportanceReport(BaseModel):
    rows: List[ImportanceRow] = Field(default_factory=list)
    noise_band: float = 0.0
    baseline_losses: List[float] = Field(default_factory=list)
    metadata: Dict[str, object] = Field(default_factory=dict)

    def ranking(self) -> List[str]:
        return [r.feature for r in sorted(self.rows, key=lambda r: r.importance, reverse=True)]

    def top(self, k: int) -> List[ImportanceRow]:
        return sorted(self.rows, key=lambda r: r.importance, reverse=True)[:k]
