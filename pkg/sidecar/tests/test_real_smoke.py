"""Real-model smoke tests.

The offline-capable configuration (SLIC segmenter, hash embedder,
identity codec) must serve a full retouch end to end; background
deviation is reported, not thresholded.  The CLIP configuration is
exercised only when its weights are actually loadable.
"""

import json
import sys

import numpy as np
import pytest

from retouch import (
    MaskGenConfig,
    NoMatchingEntityError,
    RetouchConfig,
    TextPrompt,
    generate_mask,
    resolve_backend,
    retouch,
)
from retouch_sidecar import Dispatcher, ServerConfig, handle_payload
from retouch_sidecar import protocol
from retouch_sidecar.real import ModelLoadError


def make_request(request_id, op, args):
    return protocol.dumps_canonical({"id": request_id, "op": op, "args": args})


@pytest.fixture
def slic_config(tmp_path):
    pytest.importorskip("skimage")
    cfg = tmp_path / "real.json"
    cfg.write_text(json.dumps({
        "mode": "real", "embedding_dim": 16, "embedder_seed": 0,
        "real": {"embedder": "hash", "segmenter": "slic:5",
                 "codec": "identity", "denoiser": "hash"},
    }))
    return cfg


class TestOfflineRealMode:
    def test_handshake_dims_consistent(self, slic_config):
        dispatcher = Dispatcher(ServerConfig.from_file(slic_config))
        msg = json.loads(handle_payload(make_request(1, "handshake", {}), dispatcher))
        assert msg["ok"] is True
        assert msg["result"]["embedding_dim"] == 16
        assert msg["result"]["latent_stride"] == 1
        assert msg["result"]["models"]["segmenter"] == "slic:5"

    def test_end_to_end_retouch_reports_background_deviation(self, slic_config):
        from retouch import Image

        # structured scene so superpixel clustering yields several entities
        data = np.zeros((24, 24, 3), dtype=np.float32)
        data[:12, :12] = (0.9, 0.1, 0.1)
        data[:12, 12:] = (0.1, 0.9, 0.1)
        data[12:, :12] = (0.1, 0.1, 0.9)
        data[12:, 12:] = (0.8, 0.8, 0.2)
        scene = Image(data)
        descriptor = {
            "kind": "remote",
            "endpoint": {"cmd": [sys.executable, "-m", "retouch_sidecar",
                                 "--stdio", "--config", str(slic_config)]},
        }
        bundle = resolve_backend(descriptor)
        try:
            try:
                region, report = generate_mask(
                    scene, TextPrompt("the textured patch"),
                    bundle.segmenter, bundle.text_embedder,
                    bundle.image_embedder, MaskGenConfig(floor=-1.0))
            except NoMatchingEntityError as exc:  # pragma: no cover
                pytest.fail(f"mask stage found nothing: {exc}")
            proposals = retouch(
                scene, region, TextPrompt("mosaic tiles", "conditional"),
                bundle.codec, bundle.denoiser,
                RetouchConfig(proposals=2, timesteps=20, seeds=(1, 2)))
        finally:
            bundle.close()
        assert len(proposals) == 2
        outside = region.data == 0
        if outside.any():
            deviation = max(
                float(np.abs(p.image.data[outside] - scene.data[outside]).max())
                for p in proposals
            )
        else:
            deviation = float("nan")  # the mask covered the whole image
        print(f"\nreal-mode smoke: {report.entity_count} entities, "
              f"mask covers {int(region.count())}/{region.data.size} px, "
              f"background deviation {deviation:.3e} (identity codec)")


class TestClipIfAvailable:
    def test_clip_embedder_or_skip(self):
        from retouch_sidecar.real import ClipEmbedder

        try:
            embedder = ClipEmbedder("openai/clip-vit-base-patch32")
        except ModelLoadError as exc:
            pytest.skip(f"CLIP weights unavailable in this environment: {exc}")
        vec = embedder.embed_text("a photo of a dog")
        assert abs(float(np.linalg.norm(vec)) - 1.0) <= 1e-5
