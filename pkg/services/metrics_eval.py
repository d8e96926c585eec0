from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from models.checkpoint import GridMismatchError
from models.config import CohortConfig, EvalConfig
from models.trajectory import RiskTrajectory, TrajectoryMetrics
from services.cohort_data import SingleClassError

logger = logging.getLogger(__name__)

AUPRC_ESTIMATOR = "average_precision (step interpolation)"
CLASS_NAMES = {1: "ventilated", 0: "not_ventilated"}
FLOAT_FORMAT = "%.10g"


# ===== TRAJECTORY METRICS =====

def fit_linear(x: Sequence[float], s: Sequence[float]) -> Tuple[float, float]:
    """Ordinary least squares line through (x, s): returns (slope, intercept)"""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape != s.shape or x.size < 2:
        raise ValueError("need at least two (x, s) pairs of equal length")
    if np.ptp(x) == 0:
        raise ValueError("degenerate x: all times are equal")
    slope, intercept = np.polyfit(x, s, 1)
    return float(slope), float(intercept)


def trajectory_metrics(x: Sequence[float], s: Sequence[float]) -> TrajectoryMetrics:
    """consistency = |slope|, robustness = (1 - mse) / (1 + mse) of the linear fit"""
    slope, intercept = fit_linear(x, s)
    residuals = np.asarray(s, dtype=np.float64) - (slope * np.asarray(x, dtype=np.float64) + intercept)
    mse = float(np.mean(residuals ** 2))
    return TrajectoryMetrics(slope=slope, intercept=intercept, consistency=abs(slope), mse=mse,
                             robustness=(1.0 - mse) / (1.0 + mse))


# ===== POPULATION METRICS =====

def _check_labels(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0 or not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be a non-empty sequence of 0/1")
    return labels


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """P(random positive outranks random negative), ties counted one half"""
    labels = _check_labels(labels)
    if len(np.unique(labels)) < 2:
        raise SingleClassError("AUC needs both classes")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def auprc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Average precision: Σ_k (R_k - R_{k-1}) P_k over score thresholds"""
    labels = _check_labels(labels)
    if not np.any(labels == 1):
        raise SingleClassError("AUPRC needs at least one positive")
    return float(average_precision_score(labels, np.asarray(scores, dtype=np.float64)))


# ===== TRAJECTORY SETS =====

def _labels(trajectories: Sequence[RiskTrajectory]) -> np.ndarray:
    missing = [t.patient_id for t in trajectories if t.label is None]
    if missing:
        raise ValueError(f"{len(missing)} trajectories have no label (first: {missing[0]})")
    return np.asarray([t.label for t in trajectories], dtype=int)


def score_matrix(trajectories: Sequence[RiskTrajectory]) -> np.ndarray:
    """Headline scores as an (N, X) matrix"""
    lengths = {len(t.headline) for t in trajectories}
    if len(lengths) != 1:
        raise GridMismatchError(f"trajectories have differing lengths {sorted(lengths)}")
    return np.asarray([t.headline for t in trajectories], dtype=np.float64)


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Min-max over the whole cohort (not per patient); a constant matrix maps to zeros"""
    low, high = float(np.min(scores)), float(np.max(scores))
    if high == low:
        return np.zeros_like(scores)
    return (scores - low) / (high - low)


def _time_columns(cohort: CohortConfig, evaluation: EvalConfig, every_window: bool) -> List[Tuple[str, int]]:
    if every_window:
        return [(f"{hour:g}h", j) for j, hour in enumerate(cohort.grid_points())]
    return [(label, cohort.window_of_hour(hour)) for label, hour in zip(evaluation.time_labels, evaluation.times_h)]


def _metric_or_nan(fn, labels: np.ndarray, scores: np.ndarray, model_name: str, metric: str, label: str) -> float:
    try:
        return fn(labels, scores)
    except SingleClassError as e:
        logger.warning(f"{model_name} {metric} at {label} is undefined: {e}")
        return float("nan")


def evaluate_timepoints(trajectories: Sequence[RiskTrajectory], cohort: CohortConfig, evaluation: EvalConfig,
                        model_name: str = "model", every_window: bool = False) -> pd.DataFrame:
    """AUC and AUPRC of s_j for the window containing each evaluation time (one row per metric).

    A metric that a single-class cohort leaves undefined is reported as NaN.
    """
    labels = _labels(trajectories)
    scores = score_matrix(trajectories)
    if scores.shape[1] != cohort.n_windows:
        raise GridMismatchError(f"trajectories have {scores.shape[1]} windows, grid has {cohort.n_windows}")
    columns = _time_columns(cohort, evaluation, every_window)
    rows = []
    for metric, fn in (("AUC", auc), ("AUPRC", auprc)):
        row = {"model": model_name, "metric": metric}
        row.update({label: _metric_or_nan(fn, labels, scores[:, j], model_name, metric, label)
                    for label, j in columns})
        rows.append(row)
    return pd.DataFrame(rows, columns=["model", "metric"] + [label for label, _ in columns])


class TrajectorySummary:
    """Data behind the class-mean trajectory, per-patient metric and score-distribution views"""

    def __init__(self, class_means: pd.DataFrame, patient_metrics: pd.DataFrame, histogram: pd.DataFrame):
        self.class_means = class_means
        self.patient_metrics = patient_metrics
        self.histogram = histogram

    def write(self, out_dir: str, prefix: str = ""):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(self.class_means, out / f"{prefix}class_mean_trajectory.csv")
        write_csv(self.patient_metrics, out / f"{prefix}patient_metrics.csv")
        write_csv(self.histogram, out / f"{prefix}score_histogram.csv")


def trajectory_summary(trajectories: Sequence[RiskTrajectory], cohort: CohortConfig,
                       evaluation: EvalConfig) -> TrajectorySummary:
    labels = _labels(trajectories)
    normalized = normalize_scores(score_matrix(trajectories))
    hours = np.asarray(cohort.grid_points())

    mean_rows = []
    for label in (1, 0):
        block = normalized[labels == label]
        for j, hour in enumerate(hours):
            mean_rows.append({
                "class": CLASS_NAMES[label],
                "window": j,
                "hour": hour,
                "n": int(block.shape[0]),
                "mean": float(block[:, j].mean()) if block.size else float("nan"),
                "std": float(block[:, j].std()) if block.size else float("nan"),
            })

    metric_rows = []
    for traj, label, row in zip(trajectories, labels, normalized):
        m = trajectory_metrics(hours, row)
        metric_rows.append({
            "patient_id": traj.patient_id,
            "class": CLASS_NAMES[int(label)],
            "slope": m.slope,
            "consistency": m.consistency,
            "mse": m.mse,
            "robustness": m.robustness,
        })

    window = cohort.n_windows - 1 if evaluation.histogram_hour is None else cohort.window_of_hour(evaluation.histogram_hour)
    edges = np.linspace(0.0, 1.0, evaluation.histogram_bins + 1)
    hist_rows = []
    for label in (1, 0):
        counts, _ = np.histogram(normalized[labels == label, window], bins=edges)
        hist_rows.extend({"class": CLASS_NAMES[label], "hour": float(hours[window]), "bin_lo": lo, "bin_hi": hi,
                          "count": int(c)} for lo, hi, c in zip(edges[:-1], edges[1:], counts))

    return TrajectorySummary(pd.DataFrame(mean_rows), pd.DataFrame(metric_rows), pd.DataFrame(hist_rows))


def class_slopes(summary: TrajectorySummary) -> Dict[str, float]:
    """Mean fitted slope per class"""
    return summary.patient_metrics.groupby("class")["slope"].mean().to_dict()


# ===== EXTERNAL TRAJECTORIES / COMPARISON =====

def read_trajectories(path: str, cohort: CohortConfig, labels: Mapping[str, int]) -> List[RiskTrajectory]:
    """Load a (patient_id, window, score) CSV; labels are joined from the cohort"""
    frame = pd.read_csv(path, dtype={"patient_id": str})
    missing = {"patient_id", "window", "score"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    hours = cohort.grid_points()
    trajectories = []
    for patient_id, group in frame.sort_values(["patient_id", "window"]).groupby("patient_id", sort=True):
        windows = group["window"].tolist()
        if windows != list(range(cohort.n_windows)):
            raise GridMismatchError(f"{path}: patient {patient_id} has windows {windows[:3]}..., "
                                    f"expected 0..{cohort.n_windows - 1}")
        if patient_id not in labels:
            logger.warning(f"{path}: patient {patient_id} not in the evaluation cohort, skipped")
            continue
        scores = group["score"].astype(float).tolist()
        trajectories.append(RiskTrajectory(patient_id=patient_id, label=labels[patient_id], hours=hours,
                                           logits=scores, probabilities=scores))
    return trajectories


def trajectories_frame(trajectories: Sequence[RiskTrajectory]) -> pd.DataFrame:
    """Long format: patient_id, window, hour, logit, probability, mc_probability"""
    rows = []
    for t in trajectories:
        for j, hour in enumerate(t.hours):
            rows.append({
                "patient_id": t.patient_id,
                "window": j,
                "hour": hour,
                "logit": t.logits[j],
                "probability": t.probabilities[j],
                "mc_probability": t.mc_probabilities[j] if t.mc_probabilities is not None else None,
            })
    return pd.DataFrame(rows, columns=["patient_id", "window", "hour", "logit", "probability", "mc_probability"])


def _mean_metrics(trajectories: Sequence[RiskTrajectory], cohort: CohortConfig) -> Dict[str, Tuple[float, float]]:
    labels = _labels(trajectories)
    normalized = normalize_scores(score_matrix(trajectories))
    hours = cohort.grid_points()
    metrics = [trajectory_metrics(hours, row) for row in normalized]
    out = {}
    for name, mask in (("all", np.ones_like(labels, dtype=bool)), (CLASS_NAMES[1], labels == 1),
                       (CLASS_NAMES[0], labels == 0)):
        chosen = [m for m, keep in zip(metrics, mask) if keep]
        if chosen:
            out[name] = (float(np.mean([m.consistency for m in chosen])), float(np.mean([m.robustness for m in chosen])))
    return out


def _improvement(reference: float, other: float) -> Optional[float]:
    return None if other == 0 else 100.0 * (reference - other) / other


def compare_models(models: Mapping[str, Sequence[RiskTrajectory]], reference: str,
                   cohort: CohortConfig) -> pd.DataFrame:
    """Mean consistency / robustness per model and class, plus the reference model's relative gain (%)"""
    if reference not in models:
        raise KeyError(f"reference model '{reference}' not among {sorted(models)}")
    summaries = {name: _mean_metrics(trajs, cohort) for name, trajs in models.items()}
    rows = []
    for name, by_class in summaries.items():
        for cls, (consistency, robustness) in by_class.items():
            ref_consistency, ref_robustness = summaries[reference].get(cls, (float("nan"), float("nan")))
            rows.append({
                "model": name,
                "class": cls,
                "mean_consistency": consistency,
                "mean_robustness": robustness,
                "consistency_improvement_pct": None if name == reference else _improvement(ref_consistency, consistency),
                "robustness_improvement_pct": None if name == reference else _improvement(ref_robustness, robustness),
            })
    return pd.DataFrame(rows)


def write_csv(frame: pd.DataFrame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
