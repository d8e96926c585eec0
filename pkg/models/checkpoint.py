from pydantic import BaseModel, Field
from typing import Dict, List
import base64

import numpy as np

from models.cohort import CohortManifest, Standardization
from models.config import CohortConfig, MgpConfig, NetworkConfig

CHECKPOINT_FORMAT_VERSION = 1


class GridMismatchError(ValueError):
    """The cohort grid differs from the grid a model was trained on"""


class EncodedArray(BaseModel):
    """float64 array stored as base64 little-endian bytes (bit-exact round trip)"""
    shape: List[int]
    data: str

    @classmethod
    def encode(cls, array: np.ndarray) -> "EncodedArray":
        shape = list(np.shape(array))
        raw = np.asarray(array, dtype="<f8").tobytes(order="C")
        return cls(shape=shape, data=base64.b64encode(raw).decode("ascii"))

    def decode(self) -> np.ndarray:
        raw = np.frombuffer(base64.b64decode(self.data), dtype="<f8")
        expected = int(np.prod(self.shape, dtype=np.int64))
        if raw.size != expected:
            raise ValueError(f"encoded array holds {raw.size} values, shape {self.shape} needs {expected}")
        return raw.reshape(self.shape).astype(np.float64)


class Checkpoint(BaseModel):
    """Everything needed to score a cohort: θ, ω, standardization and grid"""
    format_version: int = CHECKPOINT_FORMAT_VERSION
    cohort: CohortConfig
    mgp_config: MgpConfig
    network: NetworkConfig
    manifest: CohortManifest
    standardization: Standardization
    mgp_params: Dict[str, EncodedArray] = Field(default_factory=dict)
    network_params: Dict[str, EncodedArray] = Field(default_factory=dict)
    epochs_completed: int = 0

    @staticmethod
    def encode_params(params: Dict[str, np.ndarray]) -> Dict[str, EncodedArray]:
        return {name: EncodedArray.encode(value) for name, value in params.items()}

    @staticmethod
    def decode_params(params: Dict[str, EncodedArray]) -> Dict[str, np.ndarray]:
        return {name: value.decode() for name, value in params.items()}

    def check_grid(self, cohort: CohortConfig):
        if (cohort.n_windows, cohort.window_h) != (self.cohort.n_windows, self.cohort.window_h):
            raise GridMismatchError(
                f"model grid is {self.cohort.n_windows} x {self.cohort.window_h} h, "
                f"cohort config asks for {cohort.n_windows} x {cohort.window_h} h"
            )

    @classmethod
    def from_file(cls, path: str) -> "Checkpoint":
        with open(path, "r", encoding="utf-8") as f:
            checkpoint = cls.model_validate_json(f.read())
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"Unsupported checkpoint format version {checkpoint.format_version}")
        return checkpoint

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.model_dump_json())
            f.write("\n")
