from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from sklearn.model_selection import train_test_split

from models.cohort import (CohortManifest, EligiblePatient, MedEvent, Observation, ObservationSeries,
                           ProcessedPatient, RawPatient, Standardization, TruncationSummary)
from models.config import CohortConfig

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0


class SingleClassError(ValueError):
    """Labels contain only one class where both are required"""


class MalformedRecordError(ValueError):
    """A cohort record violates the file format or the manifest vocabulary"""


# ===== COHORT FILES =====

def read_cohort(path: str) -> Tuple[List[RawPatient], int]:
    """Parse a JSON-lines cohort file; unparseable lines are logged and counted, not fatal"""
    patients, malformed = [], 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                patients.append(RawPatient.model_validate_json(line))
            except ValidationError as e:
                malformed += 1
                logger.warning(f"{path}:{line_no}: skipping malformed record ({e.error_count()} errors)")
    return patients, malformed


def dump_cohort(patients: Sequence[RawPatient]) -> str:
    return "".join(p.model_dump_json() + "\n" for p in patients)


def write_cohort(patients: Sequence[RawPatient], path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_cohort(patients))


# ===== TRUNCATION =====

def validate_record(raw: RawPatient, manifest: CohortManifest):
    features = set(manifest.feature_names)
    medications = set(manifest.medications)
    if raw.discharge_t_s < 0 or (raw.vent_t_s is not None and raw.vent_t_s < 0):
        raise MalformedRecordError("negative ventilation or discharge time")
    if raw.vent_t_s is not None and raw.vent_t_s > raw.discharge_t_s:
        raise MalformedRecordError("ventilation after discharge")
    for obs in raw.observations:
        if obs.t_s < 0 or not (math.isfinite(obs.t_s) and math.isfinite(obs.v)):
            raise MalformedRecordError(f"bad observation of {obs.feature} at {obs.t_s} s")
        if obs.feature not in features:
            raise MalformedRecordError(f"unknown feature '{obs.feature}'")
    for med in raw.meds:
        if med.t_s < 0 or med.cat not in medications:
            raise MalformedRecordError(f"bad medication event '{med.cat}' at {med.t_s} s")
    if len(raw.demographics) != manifest.n_demographics:
        raise MalformedRecordError(f"{len(raw.demographics)} demographic values, manifest has {manifest.n_demographics}")


def truncate(raw: Sequence[RawPatient], config: CohortConfig,
             manifest: CohortManifest) -> Tuple[List[EligiblePatient], TruncationSummary]:
    """Left truncation: drop ventilation at admission, short stays and ventilation inside the study period.

    Label 1 iff ventilation happens strictly after the study period. Only records
    before the end of the study period are kept.
    """
    period = config.study_period_s
    summary = TruncationSummary(total=len(raw))
    eligible = []
    for patient in raw:
        try:
            validate_record(patient, manifest)
        except MalformedRecordError as e:
            logger.warning(f"Skipping patient {patient.id}: {e}")
            summary.exclude("malformed")
            continue

        vent = patient.vent_t_s
        if vent is not None and vent <= 0:
            summary.exclude("ventilated_at_admission")
            continue
        if vent is not None and vent <= period:
            summary.exclude("ventilated_in_study_period")
            continue
        if patient.discharge_t_s < period:
            summary.exclude("stay_shorter_than_study_period")
            continue

        kept = patient.model_copy(update={
            "observations": [o for o in patient.observations if o.t_s < period],
            "meds": [m for m in patient.meds if m.t_s < period],
        })
        label = int(vent is not None)
        eligible.append(EligiblePatient(raw=kept, label=label))
        summary.positives += label

    summary.eligible = len(eligible)
    logger.info(f"Truncation kept {summary.eligible}/{summary.total} patients "
                f"({summary.positives} positive), excluded {summary.excluded}")
    return eligible, summary


# ===== WINDOWING =====

def window_average(patient: EligiblePatient, config: CohortConfig, manifest: CohortManifest) -> ProcessedPatient:
    """Per feature, the mean of the values in each window, placed at the window center.

    Empty windows stay missing. m[j, c] = 1 iff a category-c event falls in window j.
    Records at or past X·Δ are outside the grid and ignored.
    """
    n_windows, width = config.n_windows, config.window_h
    index = {name: d for d, name in enumerate(manifest.feature_names)}
    sums = np.zeros((manifest.n_features, n_windows))
    counts = np.zeros((manifest.n_features, n_windows), dtype=int)
    for obs in patient.raw.observations:
        j = int(math.floor(obs.t_s / SECONDS_PER_HOUR / width))
        if j < n_windows:
            sums[index[obs.feature], j] += obs.v
            counts[index[obs.feature], j] += 1

    centers = config.grid_points()
    times, values = [], []
    for d in range(manifest.n_features):
        observed = np.flatnonzero(counts[d])
        times.append([centers[j] for j in observed])
        values.append([float(sums[d, j] / counts[d, j]) for j in observed])

    med_index = {name: c for c, name in enumerate(manifest.medications)}
    meds = np.zeros((n_windows, manifest.n_medications))
    for event in patient.raw.meds:
        j = int(math.floor(event.t_s / SECONDS_PER_HOUR / width))
        if j < n_windows:
            meds[j, med_index[event.cat]] = 1.0

    return ProcessedPatient(
        patient_id=patient.raw.id,
        label=patient.label,
        series=ObservationSeries(patient_id=patient.raw.id, times=times, values=values),
        meds=meds.tolist(),
        demographics=list(patient.raw.demographics),
    )


def prepare(raw: Sequence[RawPatient], config: CohortConfig,
            manifest: CohortManifest) -> Tuple[List[ProcessedPatient], TruncationSummary]:
    eligible, summary = truncate(raw, config, manifest)
    check_no_leakage(eligible, config)
    return [window_average(p, config, manifest) for p in eligible], summary


def check_no_leakage(eligible: Sequence[EligiblePatient], config: CohortConfig):
    period = config.study_period_s
    for p in eligible:
        late = [o for o in p.raw.observations if o.t_s >= period] + [m for m in p.raw.meds if m.t_s >= period]
        if late:
            raise ValueError(f"patient {p.raw.id} retains {len(late)} records past the study period")


def as_raw(patient: ProcessedPatient, config: CohortConfig, manifest: CohortManifest) -> RawPatient:
    """Re-express a processed patient as a raw record (values at window centers).

    Positives get ventilation one window after the study period; everyone is
    discharged no earlier than that.
    """
    observations = [
        Observation(feature=manifest.feature_names[d], t_s=t * SECONDS_PER_HOUR, v=v)
        for d, (ts, vs) in enumerate(zip(patient.series.times, patient.series.values))
        for t, v in zip(ts, vs)
    ]
    centers = config.grid_points()
    meds = [
        MedEvent(cat=manifest.medications[c], t_s=centers[j] * SECONDS_PER_HOUR)
        for j, row in enumerate(patient.meds) for c, flag in enumerate(row) if flag
    ]
    after_period = config.study_period_s + config.window_h * SECONDS_PER_HOUR
    return RawPatient(
        id=patient.patient_id,
        observations=observations,
        meds=meds,
        demographics=list(patient.demographics),
        vent_t_s=after_period if patient.label else None,
        discharge_t_s=after_period,
    )


# ===== STANDARDIZATION =====

def _mean_std(values: np.ndarray) -> Tuple[float, float]:
    if values.size == 0:
        return 0.0, 1.0
    std = float(np.std(values))
    return float(np.mean(values)), std if std > 0 else 1.0


def fit_standardization(train: Sequence[ProcessedPatient]) -> Standardization:
    """Per-feature mean / std of the train split's window averages; per-column demographics"""
    n_features = train[0].series.n_features
    feature_mean, feature_std = [], []
    for d in range(n_features):
        mean, std = _mean_std(np.asarray([v for p in train for v in p.series.values[d]], dtype=np.float64))
        feature_mean.append(mean)
        feature_std.append(std)
    demographics = np.asarray([p.demographics for p in train], dtype=np.float64)
    demo_stats = [_mean_std(demographics[:, f]) for f in range(demographics.shape[1])]
    return Standardization(
        feature_mean=feature_mean,
        feature_std=feature_std,
        demographic_mean=[m for m, _ in demo_stats],
        demographic_std=[s for _, s in demo_stats],
    )


def standardize(patients: Sequence[ProcessedPatient], stats: Standardization) -> List[ProcessedPatient]:
    out = []
    for p in patients:
        values = [[(v - stats.feature_mean[d]) / stats.feature_std[d] for v in vs]
                  for d, vs in enumerate(p.series.values)]
        demographics = [(w - m) / s for w, m, s in zip(p.demographics, stats.demographic_mean, stats.demographic_std)]
        out.append(p.model_copy(update={
            "series": p.series.model_copy(update={"values": values}),
            "demographics": demographics,
        }))
    return out


# ===== SPLITS / FEATURE SUBSETS =====

def split(patients: Sequence[ProcessedPatient], fraction: float = 0.8,
          seed: int = 0) -> Tuple[List[ProcessedPatient], List[ProcessedPatient]]:
    """Patient-level split stratified by label"""
    labels = [p.label for p in patients]
    if len(set(labels)) < 2:
        raise SingleClassError(f"cannot stratify a cohort of {len(labels)} patients with a single class")
    train, test = train_test_split(list(patients), train_size=fraction, stratify=labels, random_state=seed)
    return list(train), list(test)


def drop_feature(patients: Sequence[ProcessedPatient], index: int) -> List[ProcessedPatient]:
    """Remove feature ``index`` from every series (D → D-1)"""
    out = []
    for p in patients:
        series = ObservationSeries(
            patient_id=p.patient_id,
            times=[ts for d, ts in enumerate(p.series.times) if d != index],
            values=[vs for d, vs in enumerate(p.series.values) if d != index],
        )
        out.append(p.model_copy(update={"series": series}))
    return out


def drop_feature_statistics(stats: Standardization, index: int) -> Standardization:
    return stats.model_copy(update={
        "feature_mean": [m for d, m in enumerate(stats.feature_mean) if d != index],
        "feature_std": [s for d, s in enumerate(stats.feature_std) if d != index],
    })


def label_counts(patients: Sequence[ProcessedPatient]) -> Dict[int, int]:
    counts = {0: 0, 1: 0}
    for p in patients:
        counts[p.label] += 1
    return counts
