"""In-process protocol server: request dispatch plus a threaded TCP loopback.

This is the reference answering side of the wire protocol, used by the
test suite (and by conformance-corpus generation) without any external
process.  A production sidecar implements the same byte-level behavior.
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import Optional

from ..core import TextPrompt
from ..errors import FramingError
from . import BackendBundle
from . import protocol

log = logging.getLogger(__name__)


class BundleHandlers:
    """Adapts a BackendBundle to protocol ops."""

    def __init__(
        self,
        bundle: BackendBundle,
        embedding_dim: int,
        latent_stride: int = 1,
        models: Optional[dict] = None,
    ):
        self.bundle = bundle
        self.embedding_dim = int(embedding_dim)
        self.latent_stride = int(latent_stride)
        self.models = models or {"suite": "retouch-mock"}

    def handle(self, op: str, args: dict):
        if op == "handshake":
            return {
                "embedding_dim": self.embedding_dim,
                "latent_stride": self.latent_stride,
                "models": self.models,
            }
        if op == "embed_text":
            vec = self.bundle.text_embedder.embed_text(_req_str(args, "text"))
            return {"embedding": protocol.encode_tensor(vec)}
        if op == "embed_image":
            image = protocol.decode_image(_req_field(args, "image"))
            vec = self.bundle.image_embedder.embed_image(image)
            return {"embedding": protocol.encode_tensor(vec)}
        if op == "segment":
            image = protocol.decode_image(_req_field(args, "image"))
            masks = self.bundle.segmenter.segment(image)
            return {"masks": [protocol.encode_mask(m) for m in masks]}
        if op == "encode":
            image = protocol.decode_image(_req_field(args, "image"))
            return {"latent": protocol.encode_tensor(self.bundle.codec.encode(image))}
        if op == "decode":
            latent = protocol.decode_tensor(_req_field(args, "latent"), "f32")
            image = self.bundle.codec.decode(latent)
            return {"image": protocol.encode_image(image)}
        if op == "predict_noise":
            z = protocol.decode_tensor(_req_field(args, "z"), "f32")
            t = args.get("t")
            if not isinstance(t, int):
                raise BadRequest(f"predict_noise needs integer t, got {t!r}")
            text = args.get("text")
            prompt = None
            if isinstance(text, str) and text.strip():
                prompt = TextPrompt(text, role="conditional")
            eps = self.bundle.denoiser.predict_noise(z, t, prompt)
            return {"eps": protocol.encode_tensor(eps)}
        raise FramingError(f"unhandled op {op!r}")


class BadRequest(Exception):
    """Structurally valid frame whose args cannot be served."""


def _req_field(args: dict, name: str):
    if name not in args:
        raise BadRequest(f"missing request field {name!r}")
    return args[name]


def _req_str(args: dict, name: str) -> str:
    value = _req_field(args, name)
    if not isinstance(value, str):
        raise BadRequest(f"field {name!r} must be a string")
    return value


def handle_payload(payload: bytes, handlers: BundleHandlers) -> bytes:
    """One request payload in, one response payload out.

    Raises FramingError for protocol violations (the connection should
    then close); handler failures become ok:false responses so the
    serving process stays alive.
    """
    request_id, op, args = protocol.parse_request(payload)
    try:
        result = handlers.handle(op, args)
    except FramingError:
        raise
    except BadRequest as exc:
        return protocol.make_error_response(request_id, "bad_request", str(exc))
    except Exception as exc:
        return protocol.make_error_response(request_id, type(exc).__name__, str(exc))
    return protocol.make_ok_response(request_id, result)


def serve_stream(rfile, wfile, handlers: BundleHandlers) -> None:
    """Serve one framed connection until EOF or a protocol violation."""
    while True:
        try:
            payload = protocol.read_frame(rfile)
        except FramingError as exc:
            log.warning("closing connection after framing violation: %s", exc)
            try:
                protocol.write_frame(
                    wfile, protocol.make_error_response(0, "framing", str(exc))
                )
            except OSError:
                pass
            return
        if payload is None:
            return
        try:
            response = handle_payload(payload, handlers)
        except FramingError as exc:
            log.warning("closing connection after bad request: %s", exc)
            try:
                protocol.write_frame(
                    wfile, protocol.make_error_response(0, "framing", str(exc))
                )
            except OSError:
                pass
            return
        protocol.write_frame(wfile, response)


def conformance_handlers(config: Optional[dict] = None) -> BundleHandlers:
    """Standard echo/mock handler set, reconstructable from a corpus config.

    Any protocol server configured with the same values must produce
    byte-identical responses to every corpus request.
    """
    from .mocks import EchoEmbedder, GridSegmenter, HashDenoiser, IdentityCodec

    config = config or {}
    seed = int(config.get("embedder_seed", 0))
    dim = int(config.get("embedding_dim", 8))
    rows, cols = (int(v) for v in config.get("grid", (2, 2)))
    denoiser_seed = int(config.get("denoiser_seed", 0))
    models = config.get("models") or {
        "codec": "identity",
        "denoiser": f"hash-{denoiser_seed}",
        "embedder": f"echo-hash-{seed}-{dim}",
        "segmenter": f"grid-{rows}x{cols}",
    }
    embedder = EchoEmbedder(seed=seed, dim=dim)
    bundle = BackendBundle(
        text_embedder=embedder, image_embedder=embedder,
        segmenter=GridSegmenter(rows, cols), codec=IdentityCodec(),
        denoiser=HashDenoiser(seed=denoiser_seed),
    )
    return BundleHandlers(bundle, embedding_dim=dim, latent_stride=1, models=models)


class LoopbackServer:
    """Threaded TCP server answering protocol requests from a BackendBundle."""

    def __init__(self, handlers: BundleHandlers, host: str = "127.0.0.1", port: int = 0):
        self.handlers = handlers
        self._sock = socket.create_server((host, port))
        # periodic accept timeout so close() can stop the loop
        self._sock.settimeout(0.2)
        self.host, self.port = self._sock.getsockname()[:2]
        self._threads: list[threading.Thread] = []
        self._accept_thread: Optional[threading.Thread] = None
        self._closing = False

    @property
    def endpoint(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    def start(self) -> "LoopbackServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)  # accepted sockets inherit the listener's timeout
            thread = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            rfile = conn.makefile("rb")
            wfile = conn.makefile("wb")
            try:
                serve_stream(rfile, wfile, self.handlers)
            except OSError:
                pass
            finally:
                # the socket fd lives until every makefile wrapper closes
                for stream in (wfile, rfile):
                    try:
                        stream.close()
                    except OSError:
                        pass

    def close(self) -> None:
        self._closing = True
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "LoopbackServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()
