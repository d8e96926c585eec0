from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from models.checkpoint import Checkpoint, GridMismatchError
from models.cohort import CohortManifest, ProcessedPatient, Standardization
from models.config import CohortConfig, MgpConfig, NetworkConfig
from models.trajectory import RiskTrajectory
from services import tensor_core as tc
from services.attention_net import NetworkParameters, forward_logits, forward_online, risk_probabilities
from services.mgp_imputation import (MgpParameters, PosteriorGrid, TimeGrid, batch_posteriors,
                                     sample_posterior, to_grid_rows)
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


class RiskModel:
    """θ (MGP) and ω (network) plus the grid, vocabulary and standardization they were fitted with"""

    def __init__(self, mgp: MgpParameters, network: NetworkParameters, cohort: CohortConfig,
                 mgp_config: MgpConfig, manifest: CohortManifest, standardization: Standardization):
        self.mgp = mgp
        self.network = network
        self.cohort = cohort
        self.mgp_config = mgp_config
        self.manifest = manifest
        self.standardization = standardization
        self.grid = TimeGrid.from_config(cohort)
        if network.n_windows != cohort.n_windows:
            raise GridMismatchError(f"network readout has {network.n_windows} blocks, grid has {cohort.n_windows}")
        if mgp.n_features != manifest.n_features:
            raise tc.ShapeError(f"MGP has {mgp.n_features} tasks, manifest lists {manifest.n_features} features")

    @classmethod
    def initial(cls, manifest: CohortManifest, standardization: Standardization, cohort: CohortConfig,
                mgp_config: MgpConfig, network_config: NetworkConfig, seed: int) -> "RiskModel":
        rng = np.random.default_rng(seed)
        network = NetworkParameters.initial(manifest.n_features + manifest.n_medications,
                                            manifest.n_demographics, cohort.n_windows, network_config, rng)
        mgp = MgpParameters.initial(manifest.n_features, mgp_config)
        return cls(mgp, network, cohort, mgp_config, manifest, standardization)

    # ===== PARAMETERS / CHECKPOINTS =====

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"mgp.{name}": t for name, t in self.mgp.tensors().items()}
        params.update({f"net.{name}": t for name, t in self.network.tensors().items()})
        return params

    def penalized_names(self) -> Set[str]:
        return ({f"mgp.{name}" for name in self.mgp.penalized()}
                | {f"net.{name}" for name in self.network.penalized()})

    def theta_names(self) -> List[str]:
        return [name for name in self.parameters() if name.startswith("mgp.")]

    def to_checkpoint(self, epochs_completed: int = 0) -> Checkpoint:
        return Checkpoint(
            cohort=self.cohort,
            mgp_config=self.mgp_config,
            network=self.network.config,
            manifest=self.manifest,
            standardization=self.standardization,
            mgp_params=Checkpoint.encode_params(self.mgp.to_numpy()),
            network_params=Checkpoint.encode_params(self.network.to_numpy()),
            epochs_completed=epochs_completed,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "RiskModel":
        mgp = MgpParameters.from_numpy(Checkpoint.decode_params(checkpoint.mgp_params))
        network = NetworkParameters(Checkpoint.decode_params(checkpoint.network_params), checkpoint.network)
        return cls(mgp, network, checkpoint.cohort, checkpoint.mgp_config, checkpoint.manifest,
                   checkpoint.standardization)

    # ===== SCORING =====

    def check_patient(self, patient: ProcessedPatient):
        if patient.series.n_features != self.manifest.n_features:
            raise tc.ShapeError(f"patient {patient.patient_id} has {patient.series.n_features} features, "
                                f"model expects {self.manifest.n_features}")
        if len(patient.meds) != self.cohort.n_windows:
            raise GridMismatchError(f"patient {patient.patient_id} has {len(patient.meds)} windows, "
                                    f"model grid has {self.cohort.n_windows}")
        if len(patient.demographics) != self.manifest.n_demographics:
            raise tc.ShapeError(f"patient {patient.patient_id} has {len(patient.demographics)} demographic "
                                f"columns, model expects {self.manifest.n_demographics}")

    def posteriors(self, patients: Sequence[ProcessedPatient], threads: int = 1) -> List[PosteriorGrid]:
        for patient in patients:
            self.check_patient(patient)
        return batch_posteriors([p.series for p in patients], self.grid, self.mgp,
                                self.mgp_config.jitter_scale, threads)

    def sample_logits(self, patients: Sequence[ProcessedPatient], posteriors: Sequence[PosteriorGrid],
                      draws: Sequence[np.ndarray], dropout: float = 0.0, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits of every (patient, draw) pair stacked patient by patient: shape (Σ S_i, X)"""
        d, x = self.manifest.n_features, self.cohort.n_windows
        rows, meds, demographics = [], [], []
        for patient, post, eps in zip(patients, posteriors, draws):
            n_draws = eps.shape[1]
            rows.append(to_grid_rows(sample_posterior(post, eps), d, x))
            meds.append(np.repeat(np.asarray(patient.meds, dtype=np.float64)[None], n_draws, axis=0))
            demographics.append(np.repeat(np.asarray(patient.demographics, dtype=np.float64)[None], n_draws, axis=0))
        return forward_logits(tc.concat(rows, axis=0), np.concatenate(meds), np.concatenate(demographics),
                              self.network, dropout=dropout, training=training, rng=rng)

    def mean_logits(self, patient: ProcessedPatient, post: PosteriorGrid) -> np.ndarray:
        z = to_grid_rows(post.mean, self.manifest.n_features, self.cohort.n_windows)
        return forward_logits(z, np.asarray(patient.meds), np.asarray(patient.demographics), self.network).data

    def online_logits(self, patient: ProcessedPatient) -> np.ndarray:
        self.check_patient(patient)
        return forward_online(patient.series, np.asarray(patient.meds), np.asarray(patient.demographics),
                              self.grid, self.mgp, self.network, self.mgp_config.jitter_scale)

    def predict(self, patients: Sequence[ProcessedPatient], mc_samples: int = 0, seed: int = 0,
                online: bool = False, threads: int = 1) -> List[RiskTrajectory]:
        """Eval-mode trajectories: mean-path logits/probabilities plus MC-averaged probabilities when S > 0.

        MC draws are taken patient by patient from one generator seeded with ``seed``,
        so results do not depend on ``threads``. Online scoring stays on the mean path
        and never builds the full-period posterior.
        """
        rng = np.random.default_rng(seed)
        posts = [None] * len(patients) if online else self.posteriors(patients, threads)
        trajectories = []
        for patient, post in zip(patients, posts):
            logits = self.online_logits(patient) if online else self.mean_logits(patient, post)
            mc_probabilities = None
            if mc_samples > 0 and post is not None:
                eps = rng.standard_normal((post.size, mc_samples))
                sampled = self.sample_logits([patient], [post], [eps]).data
                mc_probabilities = risk_probabilities(sampled).mean(axis=0).tolist()
            trajectories.append(RiskTrajectory(
                patient_id=patient.patient_id,
                label=patient.label,
                hours=self.grid.points,
                logits=logits.tolist(),
                probabilities=risk_probabilities(logits).tolist(),
                mc_probabilities=mc_probabilities,
            ))
        logger.debug(f"Scored {len(trajectories)} patients (S={mc_samples}, online={online})")
        return trajectories
