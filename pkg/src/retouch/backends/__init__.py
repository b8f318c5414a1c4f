"""Model backend contracts, deterministic mocks, and the remote client.

Five contracts feed the pipeline: text/image embedders, a segmenter, a
latent codec, and a noise-predicting denoiser.  Everything here is
either a pure in-process stand-in or a client for the wire protocol in
`retouch.backends.protocol`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from ..core import BinaryMask, Image, TextPrompt

ENV_BACKEND = "RETOUCH_BACKEND"

DEFAULT_EMBEDDING_DIM = 16
MAX_EMBEDDING_DIM = 4096
MAX_LATENT_STRIDE = 16


@runtime_checkable
class TextEmbedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...


@runtime_checkable
class ImageEmbedder(Protocol):
    def embed_image(self, image: Image) -> np.ndarray: ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image: Image) -> list[BinaryMask]: ...


@runtime_checkable
class LatentCodec(Protocol):
    latent_stride: int

    def encode(self, image: Image) -> np.ndarray: ...
    def decode(self, latent: np.ndarray) -> Image: ...


@runtime_checkable
class Denoiser(Protocol):
    def predict_noise(
        self, z_t: np.ndarray, t: int, text: Optional[TextPrompt]
    ) -> np.ndarray: ...


@dataclass
class BackendBundle:
    """The five resolved contracts plus a descriptor echo for reports."""

    text_embedder: TextEmbedder
    image_embedder: ImageEmbedder
    segmenter: Segmenter
    codec: LatentCodec
    denoiser: Denoiser
    descriptor: dict = field(default_factory=dict)

    def close(self) -> None:
        closer = getattr(self.text_embedder, "close", None)
        if callable(closer):
            closer()

    def __enter__(self) -> "BackendBundle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def parse_descriptor(value: str | dict | None) -> dict:
    """Normalize a backend descriptor from shorthand, inline JSON, or a file.

    Accepted forms: "mock", "mock:<seed>", "fixture:<manifest.json>",
    "tcp://host:port", inline JSON starting with "{", or a path to a
    JSON descriptor file.  Falls back to $RETOUCH_BACKEND, then "mock".
    """
    if value is None:
        value = os.environ.get(ENV_BACKEND) or "mock"
    if isinstance(value, dict):
        desc = dict(value)
    else:
        text = str(value).strip()
        if text.startswith("{"):
            desc = json.loads(text)
        elif text == "mock":
            desc = {"kind": "mock"}
        elif text.startswith("mock:"):
            desc = {"kind": "mock", "seed": int(text.split(":", 1)[1])}
        elif text.startswith("fixture:"):
            desc = {"kind": "fixture", "fixture": text.split(":", 1)[1]}
        elif text.startswith("tcp://"):
            desc = {"kind": "remote", "endpoint": text}
        elif text.endswith(".json") and Path(text).exists():
            desc = json.loads(Path(text).read_text(encoding="utf-8"))
        else:
            raise ValueError(f"unrecognized backend descriptor {value!r}")
    desc.setdefault("kind", "mock")
    if desc["kind"] not in ("mock", "fixture", "remote"):
        raise ValueError(f"unknown backend kind {desc['kind']!r}")
    return desc


def resolve_backend(value: str | dict | None = None, schedule=None) -> BackendBundle:
    """Build the five contracts named by a descriptor.

    `schedule` is only needed for an oracle denoiser spec, whose target
    image must be encoded against the run's diffusion schedule.
    """
    from . import mocks
    from .remote import RemoteBackend

    desc = parse_descriptor(value)
    kind = desc["kind"]

    if kind == "remote":
        remote = RemoteBackend.connect(desc)
        echo = {**desc, "embedding_dim": remote.embedding_dim,
                "latent_stride": remote.latent_stride, "models": remote.models}
        return BackendBundle(
            text_embedder=remote, image_embedder=remote, segmenter=remote,
            codec=remote, denoiser=remote, descriptor=echo,
        )

    seed = int(desc.get("seed", 0))
    dim = int(desc.get("embedding_dim", DEFAULT_EMBEDDING_DIM))
    if not (1 <= dim <= MAX_EMBEDDING_DIM):
        raise ValueError(f"embedding_dim {dim} outside [1, {MAX_EMBEDDING_DIM}]")
    codec = mocks.IdentityCodec()

    if kind == "fixture":
        fixture_path = desc.get("fixture")
        if not fixture_path:
            raise ValueError("fixture backend needs a 'fixture' manifest path")
        fixture = mocks.load_fixture(fixture_path, fallback_seed=seed)
        text_embedder = image_embedder = fixture.embedder
        segmenter = fixture.segmenter
    else:
        embedder = mocks.HashEmbedder(seed=seed, dim=dim)
        text_embedder = image_embedder = embedder
        rows, cols = desc.get("grid", (2, 2))
        segmenter = mocks.GridSegmenter(int(rows), int(cols))

    denoiser_spec = desc.get("denoiser", "hash")
    if denoiser_spec == "hash":
        denoiser: Denoiser = mocks.HashDenoiser(seed=seed)
    elif isinstance(denoiser_spec, dict) and "oracle" in denoiser_spec:
        if schedule is None:
            raise ValueError("an oracle denoiser descriptor needs the run schedule")
        from ..imageio import read_image

        target_image = read_image(denoiser_spec["oracle"])
        denoiser = mocks.OracleDenoiser(codec.encode(target_image), schedule)
    else:
        raise ValueError(f"unknown denoiser spec {denoiser_spec!r}")

    return BackendBundle(
        text_embedder=text_embedder, image_embedder=image_embedder,
        segmenter=segmenter, codec=codec, denoiser=denoiser, descriptor=desc,
    )
