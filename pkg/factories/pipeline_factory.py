import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config_loader import load_manifest
from models.checkpoint import Checkpoint
from models.cohort import CohortManifest, ProcessedPatient, RawPatient, TruncationSummary
from models.config import RunConfig
from models.log_entry import EpochLogEntry
from models.trajectory import ImportanceReport, RiskTrajectory
from services import cohort_data, feature_importance, metrics_eval, svg_plots, trainer
from services.risk_model import RiskModel
from services.synth_cohort import synth_cohort

logger = logging.getLogger(__name__)

COHORT_FILE = "cohort.jsonl"
MANIFEST_FILE = "manifest.toml"
CHECKPOINT_FILE = "model.json"
TRAIN_LOG_FILE = "train_log.jsonl"
TEST_COHORT_FILE = "test_cohort.jsonl"
TRAJECTORY_FILE = "trajectories.csv"
RUN_CONFIG_FILE = "run_config.toml"
MODEL_NAME = "MGP-MS"


class PipelineFactory:
    """Runs one pipeline stage for a resolved RunConfig and owns its output directory"""

    def __init__(self, config: RunConfig, out_dir: str):
        self.config = config
        self.output_dir = Path(out_dir)
        self._manifest: Optional[CohortManifest] = None

    @property
    def manifest(self) -> CohortManifest:
        if self._manifest is None:
            self._manifest = load_manifest(self.config.manifest)
        return self._manifest

    def prepare_output(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config.save_to_toml(str(self.output_dir / RUN_CONFIG_FILE))

    # ===== COHORTS =====

    def synthesize(self, n_patients: Optional[int] = None,
                   prevalence: Optional[float] = None) -> Tuple[List[RawPatient], TruncationSummary]:
        self.prepare_output()
        patients = synth_cohort(self.manifest, self.config.synth, self.config.cohort, self.config.seed,
                                n_patients=n_patients, prevalence=prevalence)
        cohort_data.write_cohort(patients, str(self.output_dir / COHORT_FILE))
        self.manifest.save_to_toml(str(self.output_dir / MANIFEST_FILE))
        _, summary = cohort_data.truncate(patients, self.config.cohort, self.manifest)
        return patients, summary

    def load_cohort(self, path: str, manifest: Optional[CohortManifest] = None,
                    cohort=None) -> Tuple[List[RawPatient], List[ProcessedPatient], TruncationSummary]:
        manifest = manifest or self.manifest
        cohort = cohort or self.config.cohort
        raw, malformed = cohort_data.read_cohort(path)
        processed, summary = cohort_data.prepare(raw, cohort, manifest)
        summary.total += malformed
        for _ in range(malformed):
            summary.exclude("malformed")
        return raw, processed, summary

    # ===== TRAINING =====

    def train(self, cohort_path: str) -> trainer.FitResult:
        self.prepare_output()
        raw, processed, summary = self.load_cohort(cohort_path)
        logger.info(f"{summary.eligible} eligible patients, {summary.positives} positive")
        train, test = cohort_data.split(processed, self.config.train.train_fraction, self.config.seed)
        stats = cohort_data.fit_standardization(train)
        train, test = cohort_data.standardize(train, stats), cohort_data.standardize(test, stats)

        test_ids = {p.patient_id for p in test}
        cohort_data.write_cohort([p for p in raw if p.id in test_ids], str(self.output_dir / TEST_COHORT_FILE))

        model = RiskModel.initial(self.manifest, stats, self.config.cohort, self.config.mgp,
                                  self.config.network, self.config.seed)
        log_path = self.output_dir / TRAIN_LOG_FILE
        log_path.write_text("")

        def append_log(entry: EpochLogEntry):
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(entry.to_line() + "\n")

        try:
            result = trainer.fit(train, model, self.config.train, seed=self.config.seed,
                                 threads=self.config.threads, on_epoch=append_log)
        except trainer.TrainingDivergedError as e:
            if e.checkpoint is not None:
                e.checkpoint.save(str(self.output_dir / CHECKPOINT_FILE))
            raise
        result.checkpoint.save(str(self.output_dir / CHECKPOINT_FILE))
        return result

    # ===== SCORING =====

    def load_model(self, model_path: str) -> RiskModel:
        checkpoint = Checkpoint.from_file(model_path)
        checkpoint.check_grid(self.config.cohort)
        return RiskModel.from_checkpoint(checkpoint)

    def scored_patients(self, model: RiskModel, cohort_path: str) -> List[ProcessedPatient]:
        _, processed, _ = self.load_cohort(cohort_path, manifest=model.manifest, cohort=model.cohort)
        return cohort_data.standardize(processed, model.standardization)

    def predict(self, model_path: str, cohort_path: str, online: bool = False) -> List[RiskTrajectory]:
        self.prepare_output()
        model = self.load_model(model_path)
        patients = self.scored_patients(model, cohort_path)
        trajectories = model.predict(patients, mc_samples=self.config.train.mc_samples, seed=self.config.seed,
                                     online=online, threads=self.config.threads)
        metrics_eval.write_csv(metrics_eval.trajectories_frame(trajectories), self.output_dir / TRAJECTORY_FILE)
        return trajectories

    def evaluate(self, cohort_path: str, model_path: Optional[str] = None,
                 trajectory_paths: Sequence[str] = (), every_window: bool = False,
                 svg: bool = False) -> Dict[str, object]:
        """Timepoint table, summaries and (with several sources) a model comparison"""
        self.prepare_output()
        if model_path is None and not trajectory_paths:
            raise ValueError("evaluate needs --model and/or --trajectories")
        cohort, evaluation = self.config.cohort, self.config.evaluation
        sources: Dict[str, List[RiskTrajectory]] = {}
        if model_path is not None:
            model = self.load_model(model_path)
            patients = self.scored_patients(model, cohort_path)
            sources[MODEL_NAME] = model.predict(patients, mc_samples=self.config.train.mc_samples,
                                                seed=self.config.seed, threads=self.config.threads)
            labels = {p.patient_id: p.label for p in patients}
        else:
            _, processed, _ = self.load_cohort(cohort_path)
            labels = {p.patient_id: p.label for p in processed}
        for path in trajectory_paths:
            sources[Path(path).stem] = metrics_eval.read_trajectories(path, cohort, labels)

        tables = [metrics_eval.evaluate_timepoints(trajs, cohort, evaluation, name, every_window)
                  for name, trajs in sources.items()]
        table = pd.concat(tables, ignore_index=True)
        metrics_eval.write_csv(table, self.output_dir / "timepoints.csv")

        summaries = {}
        for name, trajs in sources.items():
            prefix = "" if len(sources) == 1 else f"{name}_"
            summary = metrics_eval.trajectory_summary(trajs, cohort, evaluation)
            summary.write(str(self.output_dir), prefix)
            if svg or evaluation.svg:
                svg_plots.write_svg(svg_plots.class_mean_chart(summary.class_means),
                                    self.output_dir / f"{prefix}class_mean_trajectory.svg")
                svg_plots.write_svg(svg_plots.slope_robustness_scatter(summary.patient_metrics),
                                    self.output_dir / f"{prefix}slope_robustness.svg")
            summaries[name] = summary

        comparison = None
        if len(sources) > 1:
            reference = MODEL_NAME if MODEL_NAME in sources else next(iter(sources))
            comparison = metrics_eval.compare_models(sources, reference, cohort)
            metrics_eval.write_csv(comparison, self.output_dir / "comparison.csv")

        metadata = {
            "models": list(sources),
            "n_patients": {name: len(trajs) for name, trajs in sources.items()},
            "auprc_estimator": metrics_eval.AUPRC_ESTIMATOR,
            "normalization": "min-max over the evaluated cohort, per model",
            "score": "mc_probability when available, else probability",
            "every_window": every_window,
        }
        (self.output_dir / "eval_metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
        return {"table": table, "summaries": summaries, "comparison": comparison}

    # ===== IMPORTANCE =====

    def importance(self, cohort_path: str, features: Optional[Sequence[str]] = None) -> ImportanceReport:
        self.prepare_output()
        _, processed, _ = self.load_cohort(cohort_path)
        processed = feature_importance.subsample(processed, self.config.importance.max_patients, self.config.seed)
        train, test = cohort_data.split(processed, self.config.train.train_fraction, self.config.seed)
        stats = cohort_data.fit_standardization(train)
        train, test = cohort_data.standardize(train, stats), cohort_data.standardize(test, stats)
        report = feature_importance.rank_features(train, test, self.manifest, stats, self.config, features)
        feature_importance.write_report(report, str(self.output_dir), self.config.importance.top_k)
        return report
