"""Model dimensions shared by the visual branches and the decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

from .errors import ConfigError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    height: int = 16
    width: int = 16
    patch: int = 4
    n_frames: int = 8  # T, frames kept after subsampling
    d_vision: int = 64  # D_v
    d_query: int = 32  # D_q
    d_scene: int = 32  # D_S
    d_model: int = 64  # D_L
    n_queries: int = 32  # N_q
    n_heads: int = 4
    ffn_expansion: int = 4
    n_layers: int = 3
    vocab_size: int = 64
    max_len: int = 24
    fusion: str = "fs"
    learned_frame_positions: bool = True
    # init std for decoder weights and context projections; None means 1/sqrt(fan_in)
    init_std: Optional[float] = None

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"frame size {self.height}x{self.width} is not divisible by patch size {self.patch}"
            )
        for name in ("d_query", "d_scene", "d_model"):
            if getattr(self, name) % self.n_heads:
                raise ConfigError(f"{name}={getattr(self, name)} is not divisible by n_heads={self.n_heads}")
        if self.init_std is not None and not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)
