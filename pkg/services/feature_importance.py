from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import pandas as pd
from sklearn.model_selection import train_test_split

from models.cohort import CohortManifest, ProcessedPatient, Standardization, UnknownFeatureError
from models.config import RunConfig
from models.trajectory import ImportanceReport, ImportanceRow
from services import cohort_data, trainer
from services.metrics_eval import AUPRC_ESTIMATOR, write_csv
from services.risk_model import RiskModel

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["rank", "feature", "importance", "baseline_loss", "dropped_loss",
                  "baseline_auc", "dropped_auc", "auc_drop"]


class RetrainScore:
    def __init__(self, loss: float, auc: Optional[float]):
        self.loss = loss
        self.auc = auc


def subsample(patients: Sequence[ProcessedPatient], max_patients: Optional[int], seed: int) -> List[ProcessedPatient]:
    """Stratified subsample of at most ``max_patients`` patients"""
    if max_patients is None or len(patients) <= max_patients:
        return list(patients)
    kept, _ = train_test_split(list(patients), train_size=max_patients,
                               stratify=[p.label for p in patients], random_state=seed)
    return list(kept)


def train_and_score(train: Sequence[ProcessedPatient], test: Sequence[ProcessedPatient],
                    manifest: CohortManifest, standardization: Standardization,
                    config: RunConfig, seed: int) -> RetrainScore:
    """Fresh model, full training run, then test cross-entropy and final-window AUC"""
    train_config = config.train
    if config.importance.epochs is not None:
        train_config = train_config.model_copy(update={"epochs": config.importance.epochs})
    model = RiskModel.initial(manifest, standardization, config.cohort, config.mgp, config.network, seed)
    trainer.fit(train, model, train_config, seed=seed)
    loss = trainer.evaluate_loss(model, list(test), train_config, seed)
    return RetrainScore(loss, trainer.final_window_auc(model, test))


def drop_feature_retrain(train: Sequence[ProcessedPatient], test: Sequence[ProcessedPatient],
                         manifest: CohortManifest, standardization: Standardization, config: RunConfig,
                         feature: str, baseline: Optional[RetrainScore] = None) -> ImportanceRow:
    """Retrain from scratch without ``feature`` (MGP task dimension included); importance = loss increase"""
    if feature not in manifest.feature_names:
        raise UnknownFeatureError(f"Unknown feature '{feature}'")
    if baseline is None:
        baseline = train_and_score(train, test, manifest, standardization, config, config.seed)
    index = manifest.feature_names.index(feature)
    dropped = train_and_score(
        cohort_data.drop_feature(train, index),
        cohort_data.drop_feature(test, index),
        manifest.without_feature(feature),
        cohort_data.drop_feature_statistics(standardization, index),
        config,
        config.seed,
    )
    auc_drop = None
    if baseline.auc is not None and dropped.auc is not None:
        auc_drop = baseline.auc - dropped.auc
    logger.info(f"Dropping {feature}: loss {baseline.loss:.5f} -> {dropped.loss:.5f}")
    return ImportanceRow(feature=feature, baseline_loss=baseline.loss, dropped_loss=dropped.loss,
                         importance=dropped.loss - baseline.loss, baseline_auc=baseline.auc,
                         dropped_auc=dropped.auc, auc_drop=auc_drop)


def rank_features(train: Sequence[ProcessedPatient], test: Sequence[ProcessedPatient],
                  manifest: CohortManifest, standardization: Standardization, config: RunConfig,
                  features: Optional[Sequence[str]] = None) -> ImportanceReport:
    """Drop-feature importance for ``features`` (default: whole vocabulary), sorted descending.

    The noise band is the spread of test losses of baselines retrained with seeds
    seed, seed + 1, ...; retrains run on up to ``config.threads`` threads.
    """
    features = list(features) if features else manifest.feature_names
    unknown = [f for f in features if f not in manifest.feature_names]
    if unknown:
        raise UnknownFeatureError(f"Unknown features {unknown}")

    seeds = [config.seed + k for k in range(config.importance.noise_baselines)]

    def baseline_for(seed: int) -> RetrainScore:
        return train_and_score(train, test, manifest, standardization, config, seed)

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        baselines = list(pool.map(baseline_for, seeds))
        reference = baselines[0]
        rows = list(pool.map(
            lambda f: drop_feature_retrain(train, test, manifest, standardization, config, f, reference), features))

    losses = [b.loss for b in baselines]
    rows.sort(key=lambda r: r.importance, reverse=True)
    return ImportanceReport(
        rows=rows,
        noise_band=max(losses) - min(losses),
        baseline_losses=losses,
        metadata={
            "n_train": len(train),
            "n_test": len(test),
            "epochs": config.importance.epochs or config.train.epochs,
            "mc_samples": config.train.mc_samples,
            "embedding_dim": config.network.embedding_dim,
            "n_layers": config.network.n_layers,
            "n_heads": config.network.n_heads,
            "baseline_seeds": seeds,
            "loss_units": "nats (mean cross-entropy per window)",
            "auc_window": "final",
            "auprc_estimator": AUPRC_ESTIMATOR,
        },
    )


def report_frame(report: ImportanceReport, top_k: Optional[int] = None) -> pd.DataFrame:
    rows = report.top(top_k) if top_k else report.top(len(report.rows))
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=REPORT_COLUMNS[1:])
    frame.insert(0, "rank", range(1, len(frame) + 1))
    return frame


def write_report(report: ImportanceReport, out_dir: str, top_k: int) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full, top = out / "importance.csv", out / f"importance_top{top_k}.csv"
    write_csv(report_frame(report), full)
    write_csv(report_frame(report, top_k), top)
    metadata = dict(report.metadata, noise_band=report.noise_band, baseline_losses=report.baseline_losses)
    (out / "importance_metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return full, top
