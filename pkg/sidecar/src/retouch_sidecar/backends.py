"""Analytic model stand-ins for echo mode.

These reproduce the reference client's in-process mocks byte for byte:
every output is derived from SHA-256 of the inputs through a PCG64
stream, so the same request yields the same reply in any process.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Optional

import numpy as np


def _digest_rng(seed: int, payload: bytes) -> np.random.Generator:
    digest = hashlib.sha256(seed.to_bytes(8, "little", signed=False) + payload).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _hash_unit_vector(seed: int, payload: bytes, dim: int) -> np.ndarray:
    rng = _digest_rng(seed, payload)
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return vec.astype(np.float32)


def image_bytes(image: np.ndarray) -> bytes:
    return np.ascontiguousarray(image, dtype="<f4").tobytes()


class EchoHashEmbedder:
    """Hash-seeded unit vectors; "echo:<base64 f32>" texts return that
    exact vector for transport loopback tests."""

    def __init__(self, seed: int = 0, dim: int = 8):
        self.seed = seed
        self.dim = dim

    def embed_text(self, text: str) -> np.ndarray:
        if text.startswith("echo:"):
            raw = base64.b64decode(text[5:].encode("ascii"), validate=True)
            return np.frombuffer(raw, dtype="<f4").copy()
        return _hash_unit_vector(self.seed, b"text\x00" + text.encode("utf-8"), self.dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return _hash_unit_vector(self.seed, b"image\x00" + image_bytes(image), self.dim)


class GridSegmenter:
    """Even rows x cols rectangles, row-major, empty cells skipped."""

    def __init__(self, rows: int = 2, cols: int = 2):
        self.rows = rows
        self.cols = cols

    def segment(self, image: np.ndarray) -> list[np.ndarray]:
        h, w = image.shape[:2]
        masks = []
        for r in range(self.rows):
            for c in range(self.cols):
                y0, y1 = r * h // self.rows, (r + 1) * h // self.rows
                x0, x1 = c * w // self.cols, (c + 1) * w // self.cols
                if y1 <= y0 or x1 <= x0:
                    continue
                mask = np.zeros((h, w), dtype=np.uint8)
                mask[y0:y1, x0:x1] = 1
                masks.append(mask)
        return masks


class IdentityCodec:
    latent_stride = 1

    def encode(self, image: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        if latent.ndim != 3 or latent.shape[0] != 3:
            raise ValueError(f"identity codec expects (3, h, w), got {latent.shape}")
        return np.clip(latent, 0.0, 1.0).transpose(1, 2, 0).astype(np.float32)


class HashDenoiser:
    """Deterministic noise prediction from (text, step, shape); ignores z."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def predict_noise(self, z: np.ndarray, t: int, text: Optional[str]) -> np.ndarray:
        label = text if isinstance(text, str) and text.strip() else ""
        payload = (
            b"noise\x00" + label.encode("utf-8") + b"\x00"
            + int(t).to_bytes(4, "little", signed=False)
            + json.dumps(list(z.shape)).encode("ascii")
        )
        rng = _digest_rng(self.seed, payload)
        return rng.standard_normal(z.shape).astype(np.float32)


class OracleDenoiser:
    """Returns the unique noise consistent with a configured target latent."""

    def __init__(self, target: np.ndarray, alpha_bars: np.ndarray):
        self.target = np.asarray(target, dtype=np.float32)
        self.alpha_bars = np.asarray(alpha_bars, dtype=np.float64)

    @classmethod
    def from_linear_schedule(cls, target: np.ndarray, timesteps: int,
                             beta_start: float = 1e-4, beta_end: float = 0.02):
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        alpha_bars = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
        return cls(target, alpha_bars)

    def predict_noise(self, z: np.ndarray, t: int, text: Optional[str]) -> np.ndarray:
        if not (1 <= t < self.alpha_bars.size):
            raise ValueError(f"t={t} outside [1, {self.alpha_bars.size - 1}]")
        a_bar = self.alpha_bars[t]
        z64 = np.asarray(z, dtype=np.float64)
        eps = (z64 - np.sqrt(a_bar) * self.target.astype(np.float64))
        eps /= np.sqrt(1.0 - a_bar)
        return eps.astype(np.float32)
