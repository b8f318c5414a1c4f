"""Server configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

MAX_EMBEDDING_DIM = 4096
MAX_LATENT_STRIDE = 16


@dataclass
class ServerConfig:
    mode: str = "echo"
    embedding_dim: int = 8
    embedder_seed: int = 0
    denoiser_seed: int = 0
    grid: tuple[int, int] = (2, 2)
    latent_stride: int = 1
    models: Optional[dict] = None
    max_concurrent: int = 4
    real: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("echo", "real"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (1 <= self.embedding_dim <= MAX_EMBEDDING_DIM):
            raise ValueError(f"embedding_dim outside [1, {MAX_EMBEDDING_DIM}]")
        if not (1 <= self.latent_stride <= MAX_LATENT_STRIDE):
            raise ValueError(f"latent_stride outside [1, {MAX_LATENT_STRIDE}]")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.grid = tuple(int(v) for v in self.grid)

    @classmethod
    def from_dict(cls, obj: dict) -> "ServerConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})

    @classmethod
    def from_file(cls, path: str | Path) -> "ServerConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
