"""Best-effort real model backends.

Loaders resolve model specs from the config's "real" section.  Anything
that needs weights or a runtime that is not available raises
ModelLoadError, which the server turns into a refused handshake.  The
SLIC segmenter is a genuine (weight-free) entity proposal algorithm, so
a partially-real configuration works fully offline.
"""

from __future__ import annotations

import numpy as np

from .backends import EchoHashEmbedder, GridSegmenter, HashDenoiser, IdentityCodec, OracleDenoiser


class ModelLoadError(Exception):
    """A configured model cannot be loaded; the handshake must be refused."""


class ClipEmbedder:
    """Vision-language embedder via a pretrained CLIP checkpoint."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ModelLoadError(f"transformers/torch unavailable: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id)
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise ModelLoadError(f"cannot load CLIP checkpoint {model_id!r}: {exc}") from exc
        self._torch = torch
        self._device = device
        self._model.eval().to(device)
        self.dim = int(self._model.config.projection_dim)

    def _normalized(self, features) -> np.ndarray:
        vec = features[0].detach().cpu().numpy().astype(np.float64)
        vec /= np.linalg.norm(vec)
        return vec.astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self._processor(text=[text], return_tensors="pt",
                                 padding=True, truncation=True)
        inputs = {k: v.to(self._device) for k, v in inputs.items()}
        with self._torch.no_grad():
            return self._normalized(self._model.get_text_features(**inputs))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raster = np.round(image * 255.0).astype(np.uint8)
        inputs = self._processor(images=[raster], return_tensors="pt")
        inputs = {k: v.to(self._device) for k, v in inputs.items()}
        with self._torch.no_grad():
            return self._normalized(self._model.get_image_features(**inputs))


class SlicSegmenter:
    """Class-agnostic entity proposals from SLIC superpixel clustering."""

    def __init__(self, n_segments: int = 6):
        try:
            from skimage.segmentation import slic
        except ImportError as exc:
            raise ModelLoadError(f"scikit-image unavailable: {exc}") from exc
        self._slic = slic
        self.n_segments = n_segments

    def segment(self, image: np.ndarray) -> list[np.ndarray]:
        labels = self._slic(
            image.astype(np.float64), n_segments=self.n_segments,
            start_label=0, channel_axis=-1, enforce_connectivity=True,
        )
        masks = []
        for value in range(int(labels.max()) + 1):
            mask = (labels == value).astype(np.uint8)
            if mask.any():
                masks.append(mask)
        return masks


def _build_embedder(spec: str, config):
    if spec == "hash":
        return EchoHashEmbedder(seed=config.embedder_seed, dim=config.embedding_dim), \
            config.embedding_dim
    if spec.startswith("clip:"):
        embedder = ClipEmbedder(spec.split(":", 1)[1],
                                device=config.real.get("device", "cpu"))
        return embedder, embedder.dim
    raise ModelLoadError(f"unknown embedder spec {spec!r}")


def _build_segmenter(spec: str, config):
    if spec.startswith("grid"):
        rows, cols = config.grid
        return GridSegmenter(rows, cols)
    if spec.startswith("slic"):
        n = int(spec.split(":", 1)[1]) if ":" in spec else 6
        return SlicSegmenter(n)
    raise ModelLoadError(f"unknown segmenter spec {spec!r}")


def _build_codec(spec: str):
    if spec == "identity":
        return IdentityCodec(), 1
    raise ModelLoadError(
        f"codec {spec!r} needs a latent-diffusion runtime that is not installed"
    )


def _build_denoiser(spec, config):
    if spec == "hash" or spec is None:
        return HashDenoiser(seed=config.denoiser_seed)
    if isinstance(spec, dict) and "oracle" in spec:
        target = np.load(spec["oracle"])
        return OracleDenoiser.from_linear_schedule(
            target, int(spec.get("timesteps", 200)))
    raise ModelLoadError(
        f"denoiser {spec!r} needs a diffusion runtime that is not installed"
    )


def build_real_backends(config):
    """Resolve the config's "real" section into live backends.

    Returns (embedder, segmenter, codec, denoiser, embedding_dim,
    latent_stride, models).
    """
    real = config.real
    embedder_spec = real.get("embedder", "hash")
    segmenter_spec = real.get("segmenter", "grid")
    codec_spec = real.get("codec", "identity")
    denoiser_spec = real.get("denoiser", "hash")

    embedder, dim = _build_embedder(embedder_spec, config)
    segmenter = _build_segmenter(segmenter_spec, config)
    codec, stride = _build_codec(codec_spec)
    denoiser = _build_denoiser(denoiser_spec, config)
    models = {
        "codec": codec_spec,
        "denoiser": denoiser_spec if isinstance(denoiser_spec, str) else "oracle",
        "embedder": embedder_spec,
        "segmenter": segmenter_spec,
    }
    return embedder, segmenter, codec, denoiser, dim, stride, models
