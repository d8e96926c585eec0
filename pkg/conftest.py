import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from models.cohort import CohortManifest, FeatureSpec, ObservationSeries, ProcessedPatient
from models.config import CohortConfig

RUN_SLOW = os.getenv("MGPMS_RUN_SLOW") == "1"
slow = pytest.mark.skipif(not RUN_SLOW, reason="set MGPMS_RUN_SLOW=1 to run acceptance-scale tests")


def tiny_manifest(n_features: int = 2, n_medications: int = 1, n_demographics: int = 1) -> CohortManifest:
    return CohortManifest(
        name="tiny",
        features=[FeatureSpec(name=f"f{d}", kind="lab" if d % 2 == 0 else "vital") for d in range(n_features)],
        medications=[f"med{c}" for c in range(n_medications)],
        demographics=[f"demo{f}" for f in range(n_demographics)],
    )


def tiny_cohort_config() -> CohortConfig:
    return CohortConfig(study_period_h=12.0, window_h=4.0, n_windows=3)


def make_patient(patient_id: str, label: int, rng: np.random.Generator, manifest: CohortManifest,
                 cohort: CohortConfig, shift: float = 1.0) -> ProcessedPatient:
    """Window-averaged patient whose first feature drifts upward when label == 1"""
    centers = cohort.grid_points()
    times, values = [], []
    for d in range(manifest.n_features):
        kept = [t for t in centers if rng.random() < 0.7] or [centers[0]]
        times.append(kept)
        trend = shift * label * (1.0 if d == 0 else 0.0)
        values.append([float(rng.normal() * 0.3 + trend * t / centers[-1]) for t in kept])
    meds = (rng.random((cohort.n_windows, manifest.n_medications)) < 0.3).astype(float).tolist()
    return ProcessedPatient(
        patient_id=patient_id,
        label=label,
        series=ObservationSeries(patient_id=patient_id, times=times, values=values),
        meds=meds,
        demographics=rng.normal(size=manifest.n_demographics).tolist(),
    )


def make_cohort(n: int, n_positive: int, seed: int = 0, manifest: CohortManifest = None,
                cohort: CohortConfig = None, shift: float = 1.0):
    manifest = manifest or tiny_manifest()
    cohort = cohort or tiny_cohort_config()
    rng = np.random.default_rng(seed)
    return [make_patient(f"T{i:03d}", int(i < n_positive), rng, manifest, cohort, shift) for i in range(n)]
