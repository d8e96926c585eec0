from __future__ import annotations

import math
from typing import Dict, List, Optional

import numpy as np

from models.cohort import ObservationSeries
from models.config import NetworkConfig
from models.trajectory import RiskTrajectory
from services import tensor_core as tc
from services.mgp_imputation import MgpParameters, TimeGrid, grid_prior, posterior, restrict_series, to_grid_rows
from services.tensor_core import Tensor

MASKED_LOGIT = -1e30
# reported probabilities stay strictly inside (0, 1)
PROBABILITY_EPS = 1e-12


class NetworkParameters:
    """ω: embedding, encoder stack, final layer norm and the cumulative readout (B_1..B_X, P)"""

    def __init__(self, arrays: Dict[str, np.ndarray], config: NetworkConfig):
        self.config = config
        self.params: Dict[str, Tensor] = {
            name: tc.tensor(value, requires_grad=True, name=name) for name, value in arrays.items()
        }
        self.n_inputs, self.embedding_dim = self["embedding"].shape
        self.n_windows = self["readout.blocks"].shape[0]
        self.n_demographics = self["readout.demographics"].shape[0]
        if self["readout.blocks"].shape[1] != self.embedding_dim:
            raise tc.ShapeError("readout blocks must have one E-vector per window")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @classmethod
    def initial(cls, n_inputs: int, n_demographics: int, n_windows: int,
                config: NetworkConfig, rng: np.random.Generator) -> "NetworkParameters":
        e, ffn = config.embedding_dim, config.ffn_dim

        def xavier(fan_in, fan_out):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        arrays: Dict[str, np.ndarray] = {"embedding": xavier(n_inputs, e)}
        for layer in range(config.n_layers):
            p = f"layer{layer}"
            arrays[f"{p}.ln1.scale"] = np.ones(e)
            arrays[f"{p}.ln1.offset"] = np.zeros(e)
            for proj in ("query", "key", "value", "output"):
                arrays[f"{p}.attn.{proj}"] = xavier(e, e)
                arrays[f"{p}.attn.{proj}_bias"] = np.zeros(e)
            arrays[f"{p}.ln2.scale"] = np.ones(e)
            arrays[f"{p}.ln2.offset"] = np.zeros(e)
            arrays[f"{p}.ffn.in"] = xavier(e, ffn)
            arrays[f"{p}.ffn.in_bias"] = np.zeros(ffn)
            arrays[f"{p}.ffn.out"] = xavier(ffn, e)
            arrays[f"{p}.ffn.out_bias"] = np.zeros(e)
        arrays["final_ln.scale"] = np.ones(e)
        arrays["final_ln.offset"] = np.zeros(e)
        arrays["readout.blocks"] = rng.normal(0.0, 1.0 / math.sqrt(e * n_windows), size=(n_windows, e))
        arrays["readout.demographics"] = np.zeros(n_demographics)
        return cls(arrays, config)

    def tensors(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def penalized(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def readout_parameter_count(self) -> int:
        return self["readout.blocks"].size + self["readout.demographics"].size


class PatientTensorInput:
    """Network input of one patient: imputed z (X×D), medications m (X×M), demographics w (F)"""

    def __init__(self, z, m: np.ndarray, w: np.ndarray):
        self.z = z if isinstance(z, Tensor) else tc.tensor(z)
        self.m = np.asarray(m, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        if self.z.ndim != 2 or self.m.ndim != 2 or self.z.shape[0] != self.m.shape[0]:
            raise tc.ShapeError(f"z {self.z.shape} and m {self.m.shape} must both be X-row matrices")
        if not np.all((self.m == 0.0) | (self.m == 1.0)):
            raise ValueError("medication indicators must be 0 or 1")
        if self.w.ndim != 1 or not np.all(np.isfinite(self.w)):
            raise ValueError("demographics must be a finite vector")


def positional_encode(n_positions: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding: PE(pos, 2k) = sin(pos / 10000^(2k/E)), PE(pos, 2k+1) = cos(...)"""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    positions = np.arange(n_positions, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    encoding = np.zeros((n_positions, dim))
    encoding[:, 0::2] = np.sin(positions / rates)
    encoding[:, 1::2] = np.cos(positions / rates)
    return encoding


def _batched(x: Tensor) -> Tensor:
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def _affine(x2d: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x2d @ weight + bias.reshape(1, -1).expand((x2d.shape[0], weight.shape[1]))


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True).expand(x.shape)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered / (variance + eps).sqrt().expand(x.shape)
    return normalized * scale.expand(x.shape) + offset.expand(x.shape)


def embed(z: Tensor, m: np.ndarray, params: NetworkParameters) -> Tensor:
    """Row-wise linear map of the concatenated (z, m) rows to E dimensions (no bias)"""
    z = z if isinstance(z, Tensor) else tc.tensor(z)
    m = np.asarray(m, dtype=np.float64)
    if z.shape[:-1] != m.shape[:-1]:
        raise tc.ShapeError(f"z {z.shape} and m {m.shape} disagree on leading dimensions")
    if z.shape[-1] + m.shape[-1] != params.n_inputs:
        raise tc.ShapeError(f"expected {params.n_inputs} input columns, got {z.shape[-1] + m.shape[-1]}")
    rows = tc.concat([z, tc.tensor(m)], axis=-1)
    lead = rows.shape[:-1]
    flat = rows.reshape(-1, params.n_inputs) @ params["embedding"]
    return flat.reshape(*lead, params.embedding_dim)


def causal_mask(n_positions: int) -> np.ndarray:
    """True where position j would attend to a later position k > j"""
    return np.triu(np.ones((n_positions, n_positions), dtype=bool), k=1)


def _self_attention(x: Tensor, params: NetworkParameters, prefix: str, n_heads: int, causal: bool) -> Tensor:
    batch, length, dim = x.shape
    head_dim = dim // n_heads
    flat = x.reshape(batch * length, dim)

    def heads(name: str) -> Tensor:
        projected = _affine(flat, params[f"{prefix}.{name}"], params[f"{prefix}.{name}_bias"])
        return (projected.reshape(batch, length, n_heads, head_dim)
                .transpose((0, 2, 1, 3)).reshape(batch * n_heads, length, head_dim))

    query, key, value = heads("query"), heads("key"), heads("value")
    scores = (query @ key.transpose((0, 2, 1))) * (1.0 / math.sqrt(head_dim))
    if causal:
        scores = tc.masked_fill(scores, causal_mask(length), MASKED_LOGIT)
    weights = tc.softmax_lastdim(scores)
    context = ((weights @ value).reshape(batch, n_heads, length, head_dim)
               .transpose((0, 2, 1, 3)).reshape(batch * length, dim))
    out = _affine(context, params[f"{prefix}.output"], params[f"{prefix}.output_bias"])
    return out.reshape(batch, length, dim)


def _feed_forward(x: Tensor, params: NetworkParameters, prefix: str) -> Tensor:
    batch, length, dim = x.shape
    hidden = _affine(x.reshape(batch * length, dim), params[f"{prefix}.in"], params[f"{prefix}.in_bias"]).relu()
    return _affine(hidden, params[f"{prefix}.out"], params[f"{prefix}.out_bias"]).reshape(batch, length, dim)


def encoder_forward(inputs: Tensor, params: NetworkParameters, causal: bool = True,
                    dropout: float = 0.0, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Pre-LN encoder stack plus final layer norm; row j of the output only sees input rows <= j"""
    if training and dropout > 0 and rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    squeeze = inputs.ndim == 2
    x = _batched(inputs)
    if x.shape[-1] != params.embedding_dim:
        raise tc.ShapeError(f"encoder expects width {params.embedding_dim}, got {x.shape[-1]}")
    config = params.config
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        normed = layer_norm(x, params[f"{p}.ln1.scale"], params[f"{p}.ln1.offset"], config.layer_norm_eps)
        x = x + tc.dropout(_self_attention(normed, params, f"{p}.attn", config.n_heads, causal),
                           dropout, rng, training)
        normed = layer_norm(x, params[f"{p}.ln2.scale"], params[f"{p}.ln2.offset"], config.layer_norm_eps)
        x = x + tc.dropout(_feed_forward(normed, params, f"{p}.ffn"), dropout, rng, training)
    out = layer_norm(x, params["final_ln.scale"], params["final_ln.offset"], config.layer_norm_eps)
    return out.reshape(*out.shape[1:]) if squeeze else out


def readout_matrix(params: NetworkParameters) -> Tensor:
    """The (X·E + F) × X block upper-triangular readout matrix"""
    n_windows, dim = params.n_windows, params.embedding_dim
    ones = tc.tensor(np.ones((1, n_windows)))
    upper = np.kron(np.triu(np.ones((n_windows, n_windows))), np.ones((dim, 1)))
    blocks = (params["readout.blocks"].reshape(n_windows * dim, 1) @ ones) * upper
    demographics = params["readout.demographics"].reshape(params.n_demographics, 1) @ ones
    return tc.concat([blocks, demographics], axis=0)


def output_scores(v: Tensor, w, params: NetworkParameters) -> Tensor:
    """s_j = Σ_{k<=j} v_kᵀ B_k + wᵀ P, for a single (X×E) or batched (N×X×E) V"""
    squeeze = v.ndim == 2
    v = _batched(v)
    batch, n_windows, dim = v.shape
    if n_windows != params.n_windows:
        raise tc.ShapeError(f"readout trained for {params.n_windows} windows, got {n_windows}")
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w.size != batch * params.n_demographics:
        raise tc.ShapeError(f"expected {params.n_demographics} demographics per patient, got shape {w.shape}")
    w = w.reshape(batch, params.n_demographics)
    flat = tc.concat([v.reshape(batch, n_windows * dim), tc.tensor(w)], axis=1)
    scores = flat @ readout_matrix(params)
    return scores.reshape(n_windows) if squeeze else scores


def forward_logits(z: Tensor, m: np.ndarray, w: np.ndarray, params: NetworkParameters,
                   dropout: float = 0.0, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """embed → + positional encoding → encoder stack → cumulative readout, batched or single"""
    embedded = embed(z, m, params)
    n_windows = embedded.shape[-2]
    encoding = np.broadcast_to(positional_encode(n_windows, params.embedding_dim), embedded.shape)
    x = tc.dropout(embedded + encoding, dropout, rng, training)
    v = encoder_forward(x, params, causal=True, dropout=dropout, training=training, rng=rng)
    return output_scores(v, w, params)


def risk_probabilities(logits: np.ndarray) -> np.ndarray:
    """sigmoid of the logits, clipped to [eps, 1 - eps]"""
    return np.clip(tc.sigmoid(tc.tensor(logits)).data, PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)


def forward(inputs: PatientTensorInput, params: NetworkParameters,
            hours: Optional[List[float]] = None, patient_id: str = "") -> RiskTrajectory:
    """Eval-mode risk trajectory of one patient"""
    logits = forward_logits(inputs.z, inputs.m, inputs.w, params).data
    probabilities = risk_probabilities(logits)
    hours = hours if hours is not None else list(range(len(logits)))
    return RiskTrajectory(patient_id=patient_id, hours=list(hours), logits=logits.tolist(),
                          probabilities=probabilities.tolist())


def forward_online(series: ObservationSeries, meds: np.ndarray, demographics: np.ndarray,
                   grid: TimeGrid, mgp: MgpParameters, params: NetworkParameters,
                   jitter_scale: float = tc.DEFAULT_JITTER_SCALE) -> np.ndarray:
    """Real-time scoring: s_j from a posterior conditioned only on observations in windows <= j.

    One MGP posterior per window (posterior-mean path), so a later observation can
    never move an earlier score.
    """
    logits = np.zeros(grid.n_points)
    prior = grid_prior(grid, mgp)
    for j in range(grid.n_points):
        seen = restrict_series(series, grid.points[j] + grid.width / 2.0)
        post = posterior(seen, grid, mgp, jitter_scale, prior=prior)
        z = to_grid_rows(post.mean, mgp.n_features, grid.n_points)
        logits[j] = forward_logits(z, meds, demographics, params).data[j]
    return logits
