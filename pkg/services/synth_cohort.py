"""
Synthetic two-class ICU-like cohort.

Each feature follows a smooth shared-kernel baseline (random Fourier features of a
squared-exponential kernel). Positive patients drift on the informative features
from a random onset; negative patients recover slowly. Observation times are a
Poisson process whose per-feature rate gives the configured window completeness.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional

import numpy as np

from models.cohort import CohortManifest, MedEvent, Observation, RawPatient, UnknownFeatureError
from models.config import CohortConfig, SynthConfig

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0
N_FOURIER_FEATURES = 16
EXTRA_HOURS_OBSERVED = 24.0


def feature_index(manifest: CohortManifest, name: str) -> int:
    try:
        return manifest.feature_names.index(name)
    except ValueError:
        raise UnknownFeatureError(f"Unknown feature '{name}'") from None


class _Baseline:
    """One draw of a unit-variance smooth process, evaluated anywhere in time"""

    def __init__(self, rng: np.random.Generator, length_scale_h: float):
        self.frequencies = rng.normal(0.0, 1.0 / length_scale_h, N_FOURIER_FEATURES)
        self.phases = rng.uniform(0.0, 2.0 * math.pi, N_FOURIER_FEATURES)
        self.weights = rng.normal(0.0, 1.0, N_FOURIER_FEATURES)

    def __call__(self, hours: np.ndarray) -> np.ndarray:
        basis = np.cos(np.outer(hours, self.frequencies) + self.phases)
        return basis @ self.weights * math.sqrt(2.0 / N_FOURIER_FEATURES)


def _demographics(manifest: CohortManifest, rng: np.random.Generator) -> List[float]:
    """One-hot groups keyed by column prefix; age buckets and a scaled age column share one draw"""
    values = np.zeros(manifest.n_demographics)
    age = rng.uniform(18.0, 90.0)
    buckets = [i for i, name in enumerate(manifest.demographics) if name.startswith("age_bucket_")]
    if buckets:
        values[buckets[min(int((age - 18.0) / (72.0 / len(buckets))), len(buckets) - 1)]] = 1.0
    groups: Dict[str, List[int]] = {}
    for i, name in enumerate(manifest.demographics):
        if name == "age_scaled":
            values[i] = round(age / 100.0, 4)
        elif i not in buckets:
            groups.setdefault(name.split("_")[0], []).append(i)
    for columns in groups.values():
        values[columns[rng.integers(len(columns))]] = 1.0
    return values.tolist()


def _event_times(rng: np.random.Generator, rate_per_hour: float, end_hour: float) -> np.ndarray:
    n = rng.poisson(rate_per_hour * end_hour)
    return np.unique(np.round(rng.uniform(0.0, end_hour, n) * SECONDS_PER_HOUR))


def synth_cohort(manifest: CohortManifest, config: SynthConfig, cohort: CohortConfig,
                 seed: int, n_patients: Optional[int] = None, prevalence: Optional[float] = None) -> List[RawPatient]:
    """Generate raw patient records; identical arguments give identical cohorts"""
    n_patients = n_patients if n_patients is not None else config.n_patients
    prevalence = prevalence if prevalence is not None else config.prevalence
    if n_patients < 2 or not 0.0 < prevalence < 1.0:
        raise ValueError("need at least two patients and a prevalence strictly between 0 and 1")
    if config.completeness_min > config.completeness_max:
        raise ValueError("completeness_min exceeds completeness_max")

    rng = np.random.default_rng(seed)
    informative = [feature_index(manifest, name) for name in config.informative_features]
    period = cohort.study_period_h

    # Cohort-level structure: window completeness and drift direction per feature
    completeness = rng.uniform(config.completeness_min, config.completeness_max, manifest.n_features)
    rates = -np.log1p(-np.minimum(completeness, 0.999)) / cohort.window_h
    direction = np.where(rng.random(manifest.n_features) < 0.5, -1.0, 1.0)
    med_rate = config.med_rate_per_day / 24.0

    patients = []
    for i in range(n_patients):
        label = int(rng.random() < prevalence)
        excluded = rng.random() < config.exclusion_fraction

        if excluded:
            pattern = rng.integers(3)
            if pattern == 0:
                vent, discharge = 0.0, period + rng.uniform(24.0, 240.0)
            elif pattern == 1:
                vent = rng.uniform(1.0, period)
                discharge = vent + rng.uniform(24.0, 240.0)
            else:
                vent, discharge = None, rng.uniform(6.0, period - 1.0)
        elif label:
            vent = period + rng.uniform(1.0, 72.0)
            discharge = vent + rng.uniform(24.0, 300.0)
        else:
            vent, discharge = None, period + rng.uniform(8.0, 200.0)

        onset = rng.uniform(0.0, period / 2.0)
        end_hour = min(discharge if vent is None else vent, period + EXTRA_HOURS_OBSERVED)
        observations = []
        for d, spec in enumerate(manifest.features):
            baseline = _Baseline(rng, config.baseline_length_scale_h)
            times_s = _event_times(rng, rates[d], end_hour)
            hours = times_s / SECONDS_PER_HOUR
            latent = baseline(hours) + config.noise_sd * rng.standard_normal(hours.size)
            if d in informative:
                if label:
                    latent = latent + direction[d] * config.drift_sd_per_hour * np.maximum(hours - onset, 0.0)
                else:
                    latent = latent - direction[d] * config.recovery_sd_per_hour * hours
            values = spec.synthetic_mean + spec.synthetic_sd * latent
            observations.extend(
                Observation(feature=spec.name, t_s=float(t), v=round(float(v), 6)) for t, v in zip(times_s, values)
            )
        observations.sort(key=lambda o: (o.t_s, o.feature))

        meds = [
            MedEvent(cat=cat, t_s=float(t))
            for cat in manifest.medications for t in _event_times(rng, med_rate, end_hour)
        ]
        meds.sort(key=lambda m: (m.t_s, m.cat))

        patients.append(RawPatient(
            id=f"P{i:06d}",
            observations=observations,
            meds=meds,
            demographics=_demographics(manifest, rng),
            vent_t_s=None if vent is None else round(vent * SECONDS_PER_HOUR),
            discharge_t_s=round(discharge * SECONDS_PER_HOUR),
        ))

    n_positive = sum(p.vent_t_s is not None for p in patients)
    logger.info(f"Generated {n_patients} synthetic patients ({n_positive} with ventilation events)")
    return patients
