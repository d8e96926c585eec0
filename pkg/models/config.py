from pydantic import BaseModel, Field, model_validator
from typing import List, Optional
import math


class CohortConfig(BaseModel):
    """Study period and windowing of the regular time grid"""
    study_period_h: float = Field(default=72.0, gt=0, description="Hours after admission used for modeling")
    window_h: float = Field(default=4.0, gt=0, description="Averaging window width (grid spacing)")
    n_windows: int = Field(default=17, ge=2, description="Grid length X; 17 by default although 72/4 = 18")

    @model_validator(mode="after")
    def _grid_inside_study_period(self):
        if self.n_windows * self.window_h > self.study_period_h + 1e-9:
            raise ValueError(
                f"{self.n_windows} windows of {self.window_h} h exceed the {self.study_period_h} h study period"
            )
        return self

    @property
    def study_period_s(self) -> float:
        return self.study_period_h * 3600.0

    def grid_points(self) -> List[float]:
        """Window centers x_j = (j + 1/2) * window_h, in hours"""
        return [(j + 0.5) * self.window_h for j in range(self.n_windows)]

    def window_of_hour(self, hour: float) -> int:
        """Index of the window containing ``hour``, clamped to the grid"""
        return min(max(int(math.floor(hour / self.window_h)), 0), self.n_windows - 1)


class MgpConfig(BaseModel):
    """Initialization and numerics of the multi-task GP"""
    init_noise: float = Field(default=0.1, gt=0, description="Initial noise variance for every feature")
    init_length_scale_h: float = Field(default=12.0, gt=0)
    jitter_scale: float = Field(default=1e-6, ge=0, description="Cholesky jitter relative to the mean diagonal")


class NetworkConfig(BaseModel):
    embedding_dim: int = Field(default=32, ge=2)
    ffn_dim: int = Field(default=64, ge=1)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    layer_norm_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def _heads_divide_embedding(self):
        if self.embedding_dim % 2:
            raise ValueError("embedding_dim must be even for the sinusoidal positional encoding")
        if self.embedding_dim % self.n_heads:
            raise ValueError("embedding_dim must be divisible by n_heads")
        return self


class TrainConfig(BaseModel):
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=50, ge=1, description="Patients per mini-batch")
    mc_samples: int = Field(default=50, ge=1, description="Posterior draws (pseudo-patients) per patient")
    learning_rate: float = Field(default=0.03, gt=0)
    lr_decay: float = Field(default=0.95, gt=0)
    dropout: float = Field(default=0.3, ge=0, lt=1)
    l2_weight: float = Field(default=1e-5, ge=0)
    pos_weight: float = Field(default=1.0, gt=0, description="Positive-class loss weight; 1.0 disables reweighting")
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    val_fraction: float = Field(default=0.1, ge=0, lt=1, description="Share of the train split held out for val AUC")


class EvalConfig(BaseModel):
    times_h: List[float] = Field(default_factory=lambda: [0.0, 12.0, 24.0, 48.0, 72.0])
    time_labels: List[str] = Field(default_factory=lambda: ["admission", "0.5d", "1d", "2d", "3d"])
    histogram_hour: Optional[float] = Field(default=None, description="None = final window")
    histogram_bins: int = Field(default=10, ge=1)
    svg: bool = False

    @model_validator(mode="after")
    def _labels_match_times(self):
        if len(self.time_labels) != len(self.times_h):
            raise ValueError("time_labels and times_h must have the same length")
        return self


class ImportanceConfig(BaseModel):
    top_k: int = Field(default=15, ge=1)
    max_patients: Optional[int] = Field(default=200, ge=4, description="Subsample size for retraining")
    epochs: Optional[int] = Field(default=None, ge=1, description="Overrides train.epochs for retrains")
    noise_baselines: int = Field(default=3, ge=1)


class SynthConfig(BaseModel):
    n_patients: int = Field(default=500, ge=2)
    prevalence: float = Field(default=0.1558, gt=0, lt=1)
    informative_features: List[str] = Field(default_factory=lambda: ["spo2", "respiratory_rate", "crp"])
    completeness_min: float = Field(default=0.3, gt=0, le=1)
    completeness_max: float = Field(default=0.98, gt=0, le=1)
    drift_sd_per_hour: float = Field(default=0.05, ge=0, description="Positive-class drift in feature SD units")
    recovery_sd_per_hour: float = Field(default=0.01, ge=0, description="Negative-class drift toward normal")
    noise_sd: float = Field(default=0.3, ge=0)
    baseline_length_scale_h: float = Field(default=12.0, gt=0)
    exclusion_fraction: float = Field(default=0.05, ge=0, lt=1)
    med_rate_per_day: float = Field(default=0.5, ge=0)


class RunConfig(BaseModel):
    """Fully resolved configuration of one CLI run"""
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    manifest: str = "manifests/covid_ventilation.toml"
    cohort: CohortConfig = Field(default_factory=CohortConfig)
    mgp: MgpConfig = Field(default_factory=MgpConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    importance: ImportanceConfig = Field(default_factory=ImportanceConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @classmethod
    def from_toml(cls, path: str) -> "RunConfig":
        import toml
        data = toml.load(path)
        return cls(**data)

    def to_toml(self) -> str:
        import toml
        return toml.dumps(self.model_dump(mode="json", exclude_none=True))

    def save_to_toml(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_toml())
