"""Deterministic in-process backends for tests, fixtures, and desk-scale runs.

The hash-seeded stand-ins derive every output from SHA-256 of their
inputs, so identical inputs give bitwise-identical outputs across runs,
platforms, and processes (the sidecar's echo mode mirrors the same
constructions byte for byte).
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import BinaryMask, Image, TextPrompt, apply_mask
from ..diffusion import DiffusionSchedule
from ..errors import BackendError, ShapeError
from ..imageio import read_mask


def _image_bytes(image: Image) -> bytes:
    return np.ascontiguousarray(image.data, dtype="<f4").tobytes()


def _digest_rng(seed: int, payload: bytes) -> np.random.Generator:
    digest = hashlib.sha256(seed.to_bytes(8, "little", signed=False) + payload).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _hash_unit_vector(seed: int, payload: bytes, dim: int) -> np.ndarray:
    rng = _digest_rng(seed, payload)
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return vec.astype(np.float32)


class HashEmbedder:
    """Text and image embedder derived from a seeded hash of the input bytes."""

    def __init__(self, seed: int = 0, dim: int = 16):
        if seed < 0:
            raise ValueError("hash embedder seed must be non-negative")
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.seed = seed
        self.dim = dim

    def embed_text(self, text: str) -> np.ndarray:
        return _hash_unit_vector(self.seed, b"text\x00" + text.encode("utf-8"), self.dim)

    def embed_image(self, image: Image) -> np.ndarray:
        return _hash_unit_vector(self.seed, b"image\x00" + _image_bytes(image), self.dim)


class EchoEmbedder:
    """Transport-test embedder: a text of the form "echo:<base64 f32>" comes
    back as exactly that vector; anything else falls through to a hash."""

    def __init__(self, seed: int = 0, dim: int = 16):
        self._fallback = HashEmbedder(seed=seed, dim=dim)

    def embed_text(self, text: str) -> np.ndarray:
        if text.startswith("echo:"):
            raw = base64.b64decode(text[5:].encode("ascii"), validate=True)
            return np.frombuffer(raw, dtype="<f4").copy()
        return self._fallback.embed_text(text)

    def embed_image(self, image: Image) -> np.ndarray:
        return self._fallback.embed_image(image)


class FixtureEmbedder:
    """Embedder answering from stored vectors, keyed by text or image hash."""

    def __init__(
        self,
        text_table: Optional[dict[str, np.ndarray]] = None,
        image_table: Optional[dict[str, np.ndarray]] = None,
        fallback_seed: int = 0,
    ):
        self.text_table = {k: np.asarray(v, dtype=np.float32) for k, v in (text_table or {}).items()}
        self.image_table = {k: np.asarray(v, dtype=np.float32) for k, v in (image_table or {}).items()}
        dims = {v.size for v in self.text_table.values()}
        dims |= {v.size for v in self.image_table.values()}
        if len(dims) > 1:
            raise ValueError(f"fixture embedding dims are inconsistent: {sorted(dims)}")
        self.dim = dims.pop() if dims else None
        self._fallback = HashEmbedder(seed=fallback_seed, dim=self.dim or 16)

    @staticmethod
    def image_key(image: Image) -> str:
        return hashlib.sha256(_image_bytes(image)).hexdigest()

    def embed_text(self, text: str) -> np.ndarray:
        hit = self.text_table.get(text)
        return hit.copy() if hit is not None else self._fallback.embed_text(text)

    def embed_image(self, image: Image) -> np.ndarray:
        hit = self.image_table.get(self.image_key(image))
        return hit.copy() if hit is not None else self._fallback.embed_image(image)


class GridSegmenter:
    """Splits the image into an even rows x cols grid of rectangular entities."""

    def __init__(self, rows: int = 2, cols: int = 2):
        if rows < 1 or cols < 1:
            raise ValueError("grid must be at least 1x1")
        self.rows = rows
        self.cols = cols

    def segment(self, image: Image) -> list[BinaryMask]:
        h, w = image.height, image.width
        masks = []
        for r in range(self.rows):
            for c in range(self.cols):
                y0, y1 = r * h // self.rows, (r + 1) * h // self.rows
                x0, x1 = c * w // self.cols, (c + 1) * w // self.cols
                if y1 <= y0 or x1 <= x0:
                    continue  # image smaller than the grid
                data = np.zeros((h, w), dtype=np.uint8)
                data[y0:y1, x0:x1] = 1
                masks.append(BinaryMask(data))
        return masks


class FixtureSegmenter:
    """Returns masks loaded from files, in manifest order."""

    def __init__(self, masks: list[BinaryMask]):
        self.masks = list(masks)

    def segment(self, image: Image) -> list[BinaryMask]:
        for i, m in enumerate(self.masks):
            if (m.height, m.width) != (image.height, image.width):
                raise ShapeError(
                    f"fixture mask {i} is {m.height}x{m.width}, "
                    f"image is {image.height}x{image.width}"
                )
        return list(self.masks)


class IdentityCodec:
    """Stride-1 codec: the image itself is the 3-channel latent."""

    latent_stride = 1

    def encode(self, image: Image) -> np.ndarray:
        return np.ascontiguousarray(image.data.transpose(2, 0, 1), dtype=np.float32)

    def decode(self, latent: np.ndarray) -> Image:
        arr = np.asarray(latent, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError(f"identity codec expects (3, h, w), got {arr.shape}")
        return Image(np.clip(arr, 0.0, 1.0).transpose(1, 2, 0))


class OracleDenoiser:
    """Predicts the unique noise consistent with a known target latent.

    Driving an eta=0 sampling loop with this denoiser converges to the
    target, which makes the whole loop checkable in closed form.
    """

    def __init__(self, target: np.ndarray, schedule: DiffusionSchedule):
        target = np.asarray(target, dtype=np.float32)
        if not np.all(np.isfinite(target)):
            raise ValueError("oracle target must be finite")
        self.target = target
        self.schedule = schedule

    def predict_noise(self, z_t, t: int, text: Optional[TextPrompt] = None) -> np.ndarray:
        if not (1 <= t <= self.schedule.timesteps):
            raise ValueError(f"t={t} outside [1, {self.schedule.timesteps}]")
        z = np.asarray(z_t, dtype=np.float64)
        if z.shape != self.target.shape:
            raise ShapeError(f"z shape {z.shape} != target shape {self.target.shape}")
        a_bar = self.schedule.alpha_bars[t]
        return (z - np.sqrt(a_bar) * self.target.astype(np.float64)) / np.sqrt(1.0 - a_bar)


class HashDenoiser:
    """Noise field derived from a seeded hash of (text, step, shape).

    Ignores z_t by construction, which keeps remote calls stateless and
    lets two processes agree bitwise on the prediction.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def predict_noise(self, z_t, t: int, text: Optional[TextPrompt] = None) -> np.ndarray:
        z = np.asarray(z_t, dtype=np.float32)
        label = text.text if text is not None else ""
        payload = (
            b"noise\x00" + label.encode("utf-8") + b"\x00"
            + int(t).to_bytes(4, "little", signed=False)
            + json.dumps(list(z.shape)).encode("ascii")
        )
        rng = _digest_rng(self.seed, payload)
        return rng.standard_normal(z.shape).astype(np.float32)


@dataclass
class FixtureBackend:
    """Segmenter plus embedder loaded from one entity-set manifest."""

    segmenter: FixtureSegmenter
    embedder: FixtureEmbedder
    image_path: str


def load_fixture(manifest_path: str | Path, fallback_seed: int = 0) -> FixtureBackend:
    """Load a JSON entity-set manifest.

    Schema: {"image": path, "entities": [{"mask_path": path,
    "embedding": [floats]?}], "text_embeddings": {text: [floats]}?,
    "image_embeddings": {sha256-hex: [floats]}?}.
    Paths are relative to the manifest file.  Entity embeddings are keyed
    by the hash of the image masked by that entity, so score_entities
    picks them up without further configuration; image_embeddings adds
    raw content-hash keys for arbitrary images (e.g. proposals).
    """
    from ..imageio import read_image

    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BackendError(f"cannot load fixture manifest {manifest_path}: {exc}") from exc

    base = manifest_path.parent
    image = read_image(base / manifest["image"])
    masks = []
    image_table: dict[str, np.ndarray] = {}
    for entry in manifest.get("entities", []):
        mask = read_mask(base / entry["mask_path"])
        masks.append(mask)
        if "embedding" in entry:
            key = FixtureEmbedder.image_key(apply_mask(image, mask))
            image_table[key] = np.asarray(entry["embedding"], dtype=np.float32)
    for key, vec in manifest.get("image_embeddings", {}).items():
        image_table[key] = np.asarray(vec, dtype=np.float32)
    text_table = {
        k: np.asarray(v, dtype=np.float32)
        for k, v in manifest.get("text_embeddings", {}).items()
    }
    embedder = FixtureEmbedder(text_table, image_table, fallback_seed=fallback_seed)
    return FixtureBackend(
        segmenter=FixtureSegmenter(masks),
        embedder=embedder,
        image_path=str(base / manifest["image"]),
    )
