from __future__ import annotations

import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from models.checkpoint import Checkpoint
from models.cohort import ProcessedPatient
from models.config import TrainConfig
from models.log_entry import EpochLogEntry, LogType
from services import cohort_data
from services import tensor_core as tc
from services.metrics_eval import auc
from services.mgp_imputation import PosteriorGrid
from services.risk_model import RiskModel
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; carries the last checkpoint whose epoch completed"""

    def __init__(self, message: str, checkpoint: Optional[Checkpoint] = None, epoch: int = 0):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class AdamState:
    """First/second moment accumulators per parameter plus the shared step counter"""

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.second = {name: np.zeros_like(t.data) for name, t in params.items()}


class FitResult:
    def __init__(self, model: RiskModel, log: List[EpochLogEntry], checkpoint: Checkpoint):
        self.model = model
        self.log = log
        self.checkpoint = checkpoint


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """lr_n = lr_0 * decay^n"""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return config.learning_rate * config.lr_decay ** epoch


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              l2_weight: float = 0.0, penalized: Iterable[str] = ()) -> Dict[str, Tensor]:
    """Bias-corrected Adam with a coupled L2 term added to the gradients of ``penalized``.

    All gradients are checked before anything moves, so a non-finite gradient leaves
    both the parameters and the optimizer state untouched.
    """
    penalized = set(penalized)
    effective = {}
    for name, t in params.items():
        g = grads.get(name)
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != t.shape:
            raise tc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {t.shape}")
        if not np.all(np.isfinite(g)):
            raise tc.NonFiniteError(f"non-finite gradient for {name}")
        effective[name] = g + l2_weight * t.data if name in penalized and l2_weight > 0 else g

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = effective[name]
        state.first[name] = state.beta1 * state.first[name] + (1.0 - state.beta1) * g
        state.second[name] = state.beta2 * state.second[name] + (1.0 - state.beta2) * g * g
        m_hat = state.first[name] / correction1
        v_hat = state.second[name] / correction2
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def cross_entropy(logits: Tensor, labels: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean logistic cross-entropy of (rows × X) logits against one label per row, replicated over X"""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be 0 or 1")
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise tc.ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    targets = np.repeat(labels[:, None], logits.shape[1], axis=1)
    weights = np.where(targets == 1.0, pos_weight, 1.0)
    # -[o log σ(s) + (1 - o) log(1 - σ(s))] = softplus(s) - o·s
    per_entry = (logits.softplus() - logits * targets) * weights
    return per_entry.mean()


def mc_loss(patient: ProcessedPatient, model: RiskModel, noise_draws: np.ndarray, pos_weight: float = 1.0,
            posterior: Optional[PosteriorGrid] = None, dropout: float = 0.0, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """(1/S) Σ_samples (1/X) Σ_j CE(σ(s_j), o) with z = μ + R ε for each column ε of ``noise_draws``"""
    if patient.label not in (0, 1):
        raise ValueError(f"patient {patient.patient_id} has non-binary label {patient.label}")
    noise_draws = np.asarray(noise_draws, dtype=np.float64)
    if noise_draws.ndim == 1:
        noise_draws = noise_draws[:, None]
    post = posterior if posterior is not None else model.posteriors([patient])[0]
    logits = model.sample_logits([patient], [post], [noise_draws], dropout=dropout, training=training, rng=rng)
    return cross_entropy(logits, np.full(noise_draws.shape[1], patient.label), pos_weight)


def batch_loss(model: RiskModel, patients: Sequence[ProcessedPatient], mc_samples: int,
               rng: np.random.Generator, config: TrainConfig, training: bool = True, threads: int = 1) -> Tensor:
    """Average mc_loss over a mini-batch, computed as one stacked forward pass"""
    posts = model.posteriors(patients, threads)
    draws = [rng.standard_normal((post.size, mc_samples)) for post in posts]
    logits = model.sample_logits(patients, posts, draws, dropout=config.dropout if training else 0.0,
                                 training=training, rng=rng)
    labels = np.repeat([p.label for p in patients], mc_samples)
    return cross_entropy(logits, labels, config.pos_weight)


def evaluate_loss(model: RiskModel, patients: Sequence[ProcessedPatient], config: TrainConfig,
                  seed: int, threads: int = 1) -> float:
    """Eval-mode MC cross-entropy over a cohort, patients weighted equally"""
    rng = np.random.default_rng(seed)
    total = 0.0
    for start in range(0, len(patients), config.batch_size):
        batch = patients[start:start + config.batch_size]
        total += batch_loss(model, batch, config.mc_samples, rng, config, training=False, threads=threads).item() * len(batch)
    return total / len(patients)


def final_window_auc(model: RiskModel, patients: Sequence[ProcessedPatient], threads: int = 1) -> Optional[float]:
    labels = [p.label for p in patients]
    if len(set(labels)) < 2:
        return None
    trajectories = model.predict(patients, mc_samples=0, threads=threads)
    return auc(labels, [t.probabilities[-1] for t in trajectories])


def _grad_norm(params: Dict[str, Tensor], names: Iterable[str]) -> float:
    return math.sqrt(sum(float(np.sum(params[n].grad ** 2)) for n in names if params[n].grad is not None))


def validation_split(train: Sequence[ProcessedPatient], config: TrainConfig, seed: int):
    if config.val_fraction <= 0:
        return list(train), []
    try:
        return cohort_data.split(train, 1.0 - config.val_fraction, seed)
    except ValueError as e:
        logger.warning(f"No validation split ({e}); training on all {len(train)} patients")
        return list(train), []


def fit(train: Sequence[ProcessedPatient], model: RiskModel, config: TrainConfig, seed: int = 0,
        threads: int = 1, on_epoch: Optional[Callable[[EpochLogEntry], None]] = None) -> FitResult:
    """Joint mini-batch training of θ and ω on the MC cross-entropy.

    MC noise and dropout masks are drawn fresh each epoch from one generator seeded
    with ``seed``, so two runs with the same inputs end with identical parameters.
    """
    if len(set(p.label for p in train)) < 2:
        raise cohort_data.SingleClassError("training split needs both classes")
    fit_set, val_set = validation_split(train, config, seed)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    theta_names = model.theta_names()
    omega_names = [n for n in params if n not in theta_names]
    penalized = model.penalized_names()
    state = AdamState(params, config.beta1, config.beta2, config.adam_eps)
    last_good = model.to_checkpoint(0)
    log: List[EpochLogEntry] = []

    logger.info(f"Training on {len(fit_set)} patients ({len(val_set)} held out) for {config.epochs} epochs, "
                f"S={config.mc_samples}, batch {config.batch_size}")
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(len(fit_set))
        loss_sum, theta_norms, omega_norms = 0.0, [], []
        for start in range(0, len(fit_set), config.batch_size):
            batch = [fit_set[i] for i in order[start:start + config.batch_size]]
            for t in params.values():
                t.zero_grad()
            try:
                loss = batch_loss(model, batch, config.mc_samples, rng, config, training=True, threads=threads)
                tc.backward(loss)
                grads = {name: t.grad for name, t in params.items()}
                theta_norms.append(_grad_norm(params, theta_names))
                omega_norms.append(_grad_norm(params, omega_names))
                adam_step(params, grads, state, lr, config.l2_weight, penalized)
            except (tc.NonFiniteError, tc.CholeskyError) as e:
                entry = EpochLogEntry(epoch=epoch, lr=lr, type=LogType.DIVERGED, message=str(e))
                log.append(entry)
                if on_epoch:
                    on_epoch(entry)
                raise TrainingDivergedError(f"training diverged in epoch {epoch}: {e}", last_good, epoch) from e
            loss_sum += loss.item() * len(batch)

        entry = EpochLogEntry(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / len(fit_set),
            val_auc=final_window_auc(model, val_set, threads) if val_set else None,
            theta_grad_norm=float(np.mean(theta_norms)) if theta_norms else 0.0,
            omega_grad_norm=float(np.mean(omega_norms)) if omega_norms else 0.0,
        )
        log.append(entry)
        if on_epoch:
            on_epoch(entry)
        logger.info(f"epoch {epoch}: loss {entry.train_loss:.5f} lr {lr:.5f} val_auc {entry.val_auc}")
        last_good = model.to_checkpoint(epoch + 1)

    return FitResult(model, log, last_good)
