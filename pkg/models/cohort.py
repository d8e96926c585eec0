from pydantic import BaseModel, Field, FiniteFloat, model_validator
from typing import Dict, List, Optional
from enum import Enum

import numpy as np


class UnknownFeatureError(KeyError):
    """A feature name that the manifest does not define"""


class FeatureKind(str, Enum):
    LAB = "lab"
    VITAL = "vital"


class FeatureSpec(BaseModel):
    """One lab test or vital sign of the manifest vocabulary"""
    name: str
    kind: FeatureKind
    unit: str = ""
    synthetic_mean: float = Field(default=0.0, description="Population mean used by the synthetic generator")
    synthetic_sd: float = Field(default=1.0, gt=0)


class CohortManifest(BaseModel):
    """Feature / medication vocabularies and demographic layout of a cohort"""
    name: str = "cohort"
    features: List[FeatureSpec]
    medications: List[str]
    demographics: List[str]

    @model_validator(mode="after")
    def _unique_names(self):
        for label, names in (("feature", self.feature_names), ("medication", self.medications),
                             ("demographic", self.demographics)):
            if len(set(names)) != len(names):
                raise ValueError(f"Duplicate {label} names in manifest")
        return self

    @property
    def feature_names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_medications(self) -> int:
        return len(self.medications)

    @property
    def n_demographics(self) -> int:
        return len(self.demographics)

    def without_feature(self, name: str) -> "CohortManifest":
        """Copy of the manifest with one feature removed"""
        if name not in self.feature_names:
            raise UnknownFeatureError(f"Unknown feature '{name}'")
        return self.model_copy(update={"features": [f for f in self.features if f.name != name]})

    @classmethod
    def from_toml(cls, path: str) -> "CohortManifest":
        import toml
        return cls(**toml.load(path))

    def save_to_toml(self, path: str):
        import toml
        with open(path, "w") as f:
            toml.dump(self.model_dump(mode="json"), f)


class Observation(BaseModel):
    feature: str
    t_s: FiniteFloat = Field(..., description="Seconds since admission")
    v: FiniteFloat


class MedEvent(BaseModel):
    cat: str
    t_s: FiniteFloat


class RawPatient(BaseModel):
    """One line of a cohort file"""
    id: str
    observations: List[Observation] = Field(default_factory=list)
    meds: List[MedEvent] = Field(default_factory=list)
    demographics: List[FiniteFloat] = Field(default_factory=list)
    vent_t_s: Optional[FiniteFloat] = None
    discharge_t_s: FiniteFloat


class ObservationSeries(BaseModel):
    """Irregular per-feature (hour, standardized value) observations of one patient"""
    patient_id: str
    times: List[List[float]] = Field(..., description="Per feature, strictly increasing hours")
    values: List[List[float]]

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.times) != len(self.values):
            raise ValueError("times and values must have one list per feature")
        for d, (ts, vs) in enumerate(zip(self.times, self.values)):
            if len(ts) != len(vs):
                raise ValueError(f"feature {d}: {len(ts)} times but {len(vs)} values")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError(f"feature {d}: times must be strictly increasing")
            if any(t < 0 for t in ts):
                raise ValueError(f"feature {d}: negative observation time")
            if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(vs))):
                raise ValueError(f"feature {d}: non-finite observation")
        return self

    @property
    def n_features(self) -> int:
        return len(self.times)

    @property
    def n_observations(self) -> int:
        return sum(len(ts) for ts in self.times)


class EligiblePatient(BaseModel):
    """A patient that passed truncation, with its label and in-period records"""
    raw: RawPatient
    label: int = Field(..., ge=0, le=1)


class ProcessedPatient(BaseModel):
    """Windowed, standardized model input for one patient"""
    patient_id: str
    label: int = Field(..., ge=0, le=1)
    series: ObservationSeries
    meds: List[List[float]] = Field(..., description="X x M binary indicators")
    demographics: List[float]


class TruncationSummary(BaseModel):
    total: int = 0
    eligible: int = 0
    positives: int = 0
    excluded: Dict[str, int] = Field(default_factory=dict)

    def exclude(self, reason: str):
        self.excluded[reason] = self.excluded.get(reason, 0) + 1

    @property
    def n_excluded(self) -> int:
        return sum(self.excluded.values())


class Standardization(BaseModel):
    """Per-feature and per-demographic-column mean / scale fitted on the train split"""
    feature_mean: List[float]
    feature_std: List[float]
    demographic_mean: List[float]
    demographic_std: List[float]
