from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from models.cohort import ObservationSeries
from models.config import CohortConfig, MgpConfig
from services import tensor_core as tc
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


class TimeGrid(BaseModel):
    """Evenly spaced grid of window centers (hours)"""
    points: List[float]
    width: float = Field(..., gt=0)

    @model_validator(mode="after")
    def _evenly_spaced(self):
        if len(self.points) < 2:
            raise ValueError("a time grid needs at least two points")
        steps = np.diff(self.points)
        if not np.allclose(steps, self.width, rtol=0.0, atol=1e-9):
            raise ValueError(f"grid points are not spaced by {self.width} h")
        return self

    @classmethod
    def from_config(cls, config: CohortConfig) -> "TimeGrid":
        return cls(points=config.grid_points(), width=config.window_h)

    @property
    def n_points(self) -> int:
        return len(self.points)


class MgpParameters:
    """θ: task covariance factor (log diagonal), per-feature log noise and log length scale.

    K^D = L_D L_Dᵀ with L_D = strict_lower(task_lower) + diag(exp(task_log_diag)),
    so K^D stays positive semi-definite under unconstrained updates.
    """

    NAMES = ("task_lower", "task_log_diag", "log_noise", "log_length_scale")

    def __init__(self, task_lower: np.ndarray, task_log_diag: np.ndarray,
                 log_noise: np.ndarray, log_length_scale: float):
        self.task_lower = tc.tensor(task_lower, requires_grad=True, name="task_lower")
        self.task_log_diag = tc.tensor(task_log_diag, requires_grad=True, name="task_log_diag")
        self.log_noise = tc.tensor(log_noise, requires_grad=True, name="log_noise")
        self.log_length_scale = tc.tensor(log_length_scale, requires_grad=True, name="log_length_scale")
        d = self.n_features
        if self.task_lower.shape != (d, d) or self.log_noise.shape != (d,):
            raise tc.ShapeError("MGP parameter shapes disagree with the feature count")
        self._strict_lower = np.tril(np.ones((d, d)), k=-1)
        self._eye = np.eye(d)

    @classmethod
    def initial(cls, n_features: int, config: Optional[MgpConfig] = None) -> "MgpParameters":
        """L_D = I, noise variance 0.1, length scale 12 h unless configured otherwise"""
        config = config or MgpConfig()
        return cls(
            task_lower=np.zeros((n_features, n_features)),
            task_log_diag=np.zeros(n_features),
            log_noise=np.full(n_features, math.log(config.init_noise)),
            log_length_scale=math.log(config.init_length_scale_h),
        )

    @classmethod
    def from_factor(cls, factor: np.ndarray, noise: np.ndarray, length_scale: float) -> "MgpParameters":
        """Build from an explicit lower-triangular L_D with positive diagonal"""
        factor = np.asarray(factor, dtype=np.float64)
        diag = np.diag(factor)
        if np.any(diag <= 0):
            raise ValueError("task factor diagonal must be strictly positive")
        return cls(np.tril(factor, k=-1), np.log(diag), np.log(np.asarray(noise, dtype=np.float64)),
                   math.log(length_scale))

    @property
    def n_features(self) -> int:
        return self.task_log_diag.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.NAMES}

    def penalized(self) -> Dict[str, Tensor]:
        """Parameters under the L2 penalty (log-scale terms excluded)"""
        return {"task_lower": self.task_lower}

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors().items()}

    @classmethod
    def from_numpy(cls, params: Dict[str, np.ndarray]) -> "MgpParameters":
        return cls(params["task_lower"], params["task_log_diag"], params["log_noise"],
                   np.asarray(params["log_length_scale"]).item())

    def task_factor(self) -> Tensor:
        diag = self.task_log_diag.exp().reshape(1, -1).expand(self._eye.shape) * self._eye
        return self.task_lower * self._strict_lower + diag

    def noise_variances(self) -> Tensor:
        return self.log_noise.exp()

    def length_scale(self) -> Tensor:
        return self.log_length_scale.exp()


class PosteriorGrid:
    """Posterior of the imputed grid values z (feature-major, index d * X + j)"""

    def __init__(self, mean: Tensor, covariance: Tensor, factor: Tensor, grid: TimeGrid, n_features: int):
        self.mean = mean
        self.covariance = covariance
        self.factor = factor
        self.grid = grid
        self.n_features = n_features

    @property
    def size(self) -> int:
        return self.mean.shape[0]


def _squared_distances(times_a: np.ndarray, times_b: np.ndarray) -> np.ndarray:
    a = np.asarray(times_a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(times_b, dtype=np.float64).reshape(1, -1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kernel times must be finite")
    return (a - b) ** 2


def se_kernel_matrix(times_a, times_b, length_scale: Union[Tensor, float]) -> Tensor:
    """k(a, b) = exp(-(a - b)^2 / (2 l^2))"""
    scale = length_scale if isinstance(length_scale, Tensor) else tc.tensor(length_scale)
    if np.any(scale.data <= 0):
        raise ValueError("length scale must be positive")
    coefficient = -0.5 / (scale * scale)
    return (tc.tensor(_squared_distances(times_a, times_b)) * coefficient).exp()


def _se_kernel_from_log(times_a, times_b, log_length_scale: Tensor) -> Tensor:
    coefficient = (log_length_scale * -2.0).exp() * -0.5
    return (tc.tensor(_squared_distances(times_a, times_b)) * coefficient).exp()


def task_covariance(params: MgpParameters) -> Tensor:
    """K^D = L_D L_Dᵀ"""
    factor = params.task_factor()
    return factor @ factor.T


def observed_index(obs: ObservationSeries):
    """Feature index, time and value of every observed entry, feature-major"""
    features = np.concatenate([np.full(len(ts), d, dtype=int) for d, ts in enumerate(obs.times)] or [np.zeros(0, int)])
    times = np.concatenate([np.asarray(ts, dtype=np.float64) for ts in obs.times] or [np.zeros(0)])
    values = np.concatenate([np.asarray(vs, dtype=np.float64) for vs in obs.values] or [np.zeros(0)])
    return features, times, values


def _grid_index(grid: TimeGrid, n_features: int):
    features = np.repeat(np.arange(n_features), grid.n_points)
    times = np.tile(np.asarray(grid.points, dtype=np.float64), n_features)
    return features, times


def _cross_covariance(task_cov: Tensor, rows_d, rows_t, cols_d, cols_t, log_length_scale: Tensor) -> Tensor:
    task_block = task_cov[(np.asarray(rows_d)[:, None], np.asarray(cols_d)[None, :])]
    return task_block * _se_kernel_from_log(rows_t, cols_t, log_length_scale)


def _noise_diagonal(params: MgpParameters, features: np.ndarray) -> Tensor:
    n = features.size
    return params.noise_variances()[features].reshape(n, 1).expand((n, n)) * np.eye(n)


def observed_covariance(obs: ObservationSeries, params: MgpParameters,
                        task_cov: Optional[Tensor] = None) -> Tensor:
    """Covariance of the observed entries: the observed submatrix of K^D ⊗ K^T + E ⊗ I"""
    if obs.n_features != params.n_features:
        raise tc.ShapeError(f"series has {obs.n_features} features, parameters expect {params.n_features}")
    features, times, _ = observed_index(obs)
    if features.size == 0:
        raise ValueError(f"patient {obs.patient_id} has no observations")
    task_cov = task_covariance(params) if task_cov is None else task_cov
    signal = _cross_covariance(task_cov, features, times, features, times, params.log_length_scale)
    return signal + _noise_diagonal(params, features)


def grid_prior(grid: TimeGrid, params: MgpParameters) -> Tensor:
    """Prior covariance K^D ⊗ K^X of the feature-major grid values"""
    points = np.asarray(grid.points, dtype=np.float64)
    return tc.kron(task_covariance(params), _se_kernel_from_log(points, points, params.log_length_scale))


def grid_positions(obs: ObservationSeries, grid: TimeGrid) -> Optional[np.ndarray]:
    """Index d·X + j of every observed entry when all of them sit on grid points, else None"""
    features, times, _ = observed_index(obs)
    points = np.asarray(grid.points, dtype=np.float64)
    windows = np.rint((times - points[0]) / grid.width).astype(int)
    if np.any(windows < 0) or np.any(windows >= grid.n_points):
        return None
    if not np.allclose(points[windows], times, rtol=0.0, atol=1e-9):
        return None
    return features * grid.n_points + windows


def posterior(obs: ObservationSeries, grid: TimeGrid, params: MgpParameters,
              jitter_scale: float = tc.DEFAULT_JITTER_SCALE, prior: Optional[Tensor] = None) -> PosteriorGrid:
    """Posterior mean and covariance of z on the grid given the observed entries.

    mean = C Σ_obs⁻¹ y, cov = K^D ⊗ K^X − C Σ_obs⁻¹ Cᵀ, with C the grid/observation
    cross-covariance; solves go through the Cholesky factor of Σ_obs. A patient with
    no observations gets the prior. ``prior`` may be passed in to share one
    ``grid_prior`` across a batch.
    """
    if obs.n_features != params.n_features:
        raise tc.ShapeError(f"series has {obs.n_features} features, parameters expect {params.n_features}")
    d = params.n_features
    prior = grid_prior(grid, params) if prior is None else prior
    size = d * grid.n_points
    if prior.shape != (size, size):
        raise tc.ShapeError(f"prior of shape {prior.shape} does not match a {d} x {grid.n_points} grid")

    features, times, values = observed_index(obs)
    if features.size == 0:
        mean = tc.tensor(np.zeros(size))
        covariance = prior
    else:
        positions = grid_positions(obs, grid)
        if positions is not None:
            # windowed series: every block is a slice of the grid prior
            cross = tc.take_submatrix(prior, np.arange(size), positions)
            obs_cov = tc.take_submatrix(prior, positions, positions) + _noise_diagonal(params, features)
        else:
            task_cov = task_covariance(params)
            grid_d, grid_t = _grid_index(grid, d)
            cross = _cross_covariance(task_cov, grid_d, grid_t, features, times, params.log_length_scale)
            obs_cov = observed_covariance(obs, params, task_cov=task_cov)
        obs_factor = tc.cholesky(obs_cov, jitter=jitter_scale * float(np.mean(np.diag(obs_cov.data))),
                                 label=f"observed covariance of patient {obs.patient_id}")
        whitened = tc.solve_triangular(obs_factor, cross.T)
        alpha = tc.solve_triangular(obs_factor, tc.tensor(values.reshape(-1, 1)))
        mean = (whitened.T @ alpha).reshape(size)
        covariance = prior - whitened.T @ whitened

    factor = tc.cholesky(covariance, jitter=jitter_scale * float(np.mean(np.abs(np.diag(covariance.data)))),
                         label=f"posterior covariance of patient {obs.patient_id}")
    return PosteriorGrid(mean, covariance, factor, grid, d)


def sample_posterior(post: PosteriorGrid, noise_draw: Union[np.ndarray, Tensor]) -> Tensor:
    """z = μ + R ε; ``noise_draw`` is (X·D,) for one draw or (X·D, S) for S draws"""
    eps = noise_draw if isinstance(noise_draw, Tensor) else tc.tensor(noise_draw)
    if eps.shape[0] != post.size or eps.ndim not in (1, 2):
        raise tc.ShapeError(f"noise draw of shape {eps.shape} does not match posterior size {post.size}")
    if eps.ndim == 1:
        return post.mean + (post.factor @ eps.reshape(post.size, 1)).reshape(post.size)
    n_samples = eps.shape[1]
    return post.mean.reshape(post.size, 1).expand((post.size, n_samples)) + post.factor @ eps


def to_grid_rows(z: Tensor, n_features: int, n_points: int) -> Tensor:
    """Feature-major z → (X, D) for one draw or (S, X, D) for a (X·D, S) batch"""
    if z.ndim == 1:
        return z.reshape(n_features, n_points).transpose((1, 0))
    return z.reshape(n_features, n_points, z.shape[1]).transpose((2, 1, 0))


def restrict_series(obs: ObservationSeries, before_hour: float) -> ObservationSeries:
    """Keep only observations strictly before ``before_hour``"""
    times, values = [], []
    for ts, vs in zip(obs.times, obs.values):
        keep = [i for i, t in enumerate(ts) if t < before_hour]
        times.append([ts[i] for i in keep])
        values.append([vs[i] for i in keep])
    return ObservationSeries(patient_id=obs.patient_id, times=times, values=values)


def batch_posteriors(series: List[ObservationSeries], grid: TimeGrid, params: MgpParameters,
                     jitter_scale: float = tc.DEFAULT_JITTER_SCALE, threads: int = 1) -> List[PosteriorGrid]:
    """Per-patient posteriors sharing one grid prior, optionally on a thread pool (order preserved)"""
    if not series:
        return []
    prior = grid_prior(grid, params)

    def one(s: ObservationSeries) -> PosteriorGrid:
        return posterior(s, grid, params, jitter_scale, prior=prior)

    if threads <= 1 or len(series) <= 1:
        return [one(s) for s in series]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, series))
