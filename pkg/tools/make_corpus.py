#!/usr/bin/env python3
"""Regenerate the frozen protocol conformance corpus.

The corpus is a list of (request, response) frame payloads recorded
against the standard mock handler set.  Any server implementation
configured identically must reproduce every response byte for byte.
Run from the repository root:

    python3 tools/make_corpus.py
"""

import base64
import json
from pathlib import Path

import numpy as np

from retouch.backends import protocol
from retouch.backends.server import conformance_handlers, handle_payload

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "conformance_corpus.json"

CONFIG = {
    "embedder_seed": 0,
    "embedding_dim": 8,
    "latent_stride": 1,
    "grid": [2, 2],
    "denoiser_seed": 0,
    "models": {
        "codec": "identity",
        "denoiser": "hash-0",
        "embedder": "echo-hash-0-8",
        "segmenter": "grid-2x2",
    },
}


def corpus_image() -> np.ndarray:
    # fixed 4x4 RGB raster on the 8-bit grid, as a file read would produce
    values = np.arange(48, dtype=np.float32).reshape(4, 4, 3)
    return values / np.float32(255.0)


def build_requests() -> list[bytes]:
    image = protocol.encode_tensor(corpus_image())
    echo_vec = np.array([1.5, -2.25, 0.125], dtype="<f4")
    echo_text = "echo:" + base64.b64encode(echo_vec.tobytes()).decode("ascii")
    latent = protocol.encode_tensor(corpus_image().transpose(2, 0, 1))
    z = protocol.encode_tensor(
        np.linspace(-1.0, 1.0, 12, dtype=np.float32).reshape(3, 2, 2))
    return [
        protocol.make_request(1, "handshake", {}),
        protocol.make_request(2, "embed_text", {"text": "a red dog"}),
        protocol.make_request(3, "embed_text", {"text": echo_text}),
        protocol.make_request(4, "embed_image", {"image": image}),
        protocol.make_request(5, "segment", {"image": image}),
        protocol.make_request(6, "encode", {"image": image}),
        protocol.make_request(7, "decode", {"latent": latent}),
        protocol.make_request(8, "predict_noise",
                              {"z": z, "t": 5, "text": "make it blue"}),
        protocol.make_request(9, "predict_noise",
                              {"z": z, "t": "five", "text": None}),
        protocol.make_request(10, "embed_text", {}),
        protocol.make_request(1099511627776, "handshake", {}),
    ]


def main() -> None:
    handlers = conformance_handlers(CONFIG)
    frames = []
    for request in build_requests():
        response = handle_payload(request, handlers)
        frames.append({
            "op": json.loads(request)["op"],
            "request": request.hex(),
            "response": response.hex(),
        })
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps({"config": CONFIG, "frames": frames}, indent=2) + "\n")
    print(f"wrote {len(frames)} frames to {OUT}")


if __name__ == "__main__":
    main()
