"""Protocol server: dispatch, bounded concurrency, TCP and stdio transports.

Requests are answered as their workers finish, so responses may leave in
any order; clients correlate by id.  Excess requests queue FIFO in the
worker pool.  A model-load failure refuses the handshake (and every
other op) with a typed error but keeps the process alive.
"""

from __future__ import annotations

import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor, wait
from typing import BinaryIO, Optional

import numpy as np

from . import protocol
from .backends import EchoHashEmbedder, GridSegmenter, HashDenoiser, IdentityCodec
from .config import ServerConfig
from .real import ModelLoadError, build_real_backends

log = logging.getLogger("retouch_sidecar")


class BadRequest(Exception):
    """Structurally valid frame whose args cannot be served."""


class _Backends:
    def __init__(self, embedder, segmenter, codec, denoiser,
                 embedding_dim, latent_stride, models):
        self.embedder = embedder
        self.segmenter = segmenter
        self.codec = codec
        self.denoiser = denoiser
        self.embedding_dim = embedding_dim
        self.latent_stride = latent_stride
        self.models = models


class Dispatcher:
    """Maps protocol ops onto the configured backends (built lazily)."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self._backends: Optional[_Backends] = None
        self._load_error: Optional[ModelLoadError] = None
        self._lock = threading.Lock()

    def _build(self) -> _Backends:
        cfg = self.config
        if cfg.mode == "echo":
            rows, cols = cfg.grid
            models = cfg.models or {
                "codec": "identity",
                "denoiser": f"hash-{cfg.denoiser_seed}",
                "embedder": f"echo-hash-{cfg.embedder_seed}-{cfg.embedding_dim}",
                "segmenter": f"grid-{rows}x{cols}",
            }
            return _Backends(
                EchoHashEmbedder(seed=cfg.embedder_seed, dim=cfg.embedding_dim),
                GridSegmenter(rows, cols), IdentityCodec(),
                HashDenoiser(seed=cfg.denoiser_seed),
                cfg.embedding_dim, cfg.latent_stride, models,
            )
        parts = build_real_backends(cfg)
        return _Backends(*parts)

    def _ensure(self) -> _Backends:
        with self._lock:
            if self._backends is None and self._load_error is None:
                try:
                    self._backends = self._build()
                except ModelLoadError as exc:
                    log.error("model load failed: %s", exc)
                    self._load_error = exc
            if self._load_error is not None:
                raise self._load_error
            return self._backends

    def handle(self, op: str, args: dict):
        backends = self._ensure()
        if op == "handshake":
            return {
                "embedding_dim": backends.embedding_dim,
                "latent_stride": backends.latent_stride,
                "models": backends.models,
            }
        if op == "embed_text":
            vec = backends.embedder.embed_text(_req_str(args, "text"))
            return {"embedding": protocol.encode_tensor(vec)}
        if op == "embed_image":
            image = protocol.decode_image(_req_field(args, "image"))
            vec = backends.embedder.embed_image(image)
            return {"embedding": protocol.encode_tensor(vec)}
        if op == "segment":
            image = protocol.decode_image(_req_field(args, "image"))
            masks = backends.segmenter.segment(image)
            encoded = []
            for mask in masks:
                mask = np.asarray(mask)
                if mask.dtype.kind == "f":
                    mask = (mask >= 0.5).astype(np.uint8)  # binarize soft masks
                else:
                    mask = (mask != 0).astype(np.uint8)
                encoded.append(protocol.encode_tensor(mask, "u8"))
            return {"masks": encoded}
        if op == "encode":
            image = protocol.decode_image(_req_field(args, "image"))
            return {"latent": protocol.encode_tensor(backends.codec.encode(image))}
        if op == "decode":
            latent = protocol.decode_tensor(_req_field(args, "latent"), "f32")
            image = backends.codec.decode(latent)
            return {"image": protocol.encode_tensor(image)}
        if op == "predict_noise":
            z = protocol.decode_tensor(_req_field(args, "z"), "f32")
            t = args.get("t")
            if not isinstance(t, int):
                raise BadRequest(f"predict_noise needs integer t, got {t!r}")
            text = args.get("text")
            if not (isinstance(text, str) and text.strip()):
                text = None
            eps = backends.denoiser.predict_noise(z, t, text)
            return {"eps": protocol.encode_tensor(eps)}
        raise protocol.ProtocolViolation(f"unhandled op {op!r}")


def _req_field(args: dict, name: str):
    if name not in args:
        raise BadRequest(f"missing request field {name!r}")
    return args[name]


def _req_str(args: dict, name: str) -> str:
    value = _req_field(args, name)
    if not isinstance(value, str):
        raise BadRequest(f"field {name!r} must be a string")
    return value


def handle_payload(payload: bytes, dispatcher: Dispatcher) -> bytes:
    """One request payload in, one response payload out; raises
    ProtocolViolation when the connection must close."""
    request_id, op, args = protocol.parse_request(payload)
    try:
        result = dispatcher.handle(op, args)
    except protocol.ProtocolViolation:
        raise
    except BadRequest as exc:
        return protocol.make_error_response(request_id, "bad_request", str(exc))
    except ModelLoadError as exc:
        return protocol.make_error_response(request_id, "model_load", str(exc))
    except Exception as exc:
        return protocol.make_error_response(request_id, type(exc).__name__, str(exc))
    return protocol.make_ok_response(request_id, result)


class Connection:
    """Serves one framed stream, fanning requests out to the worker pool."""

    def __init__(self, rfile: BinaryIO, wfile: BinaryIO,
                 dispatcher: Dispatcher, pool: ThreadPoolExecutor):
        self.rfile = rfile
        self.wfile = wfile
        self.dispatcher = dispatcher
        self.pool = pool
        self._write_lock = threading.Lock()
        self._fatal = threading.Event()

    def _send(self, response: bytes) -> None:
        with self._write_lock:
            try:
                protocol.write_frame(self.wfile, response)
            except OSError:
                self._fatal.set()

    def _work(self, payload: bytes) -> None:
        try:
            response = handle_payload(payload, self.dispatcher)
        except protocol.ProtocolViolation as exc:
            log.warning("protocol violation: %s", exc)
            self._send(protocol.make_error_response(0, "framing", str(exc)))
            self._fatal.set()
            return
        self._send(response)

    def serve(self) -> None:
        futures = []
        while not self._fatal.is_set():
            try:
                payload = protocol.read_frame(self.rfile)
            except (protocol.ProtocolViolation, OSError) as exc:
                log.warning("closing connection: %s", exc)
                self._send(protocol.make_error_response(0, "framing", str(exc)))
                break
            if payload is None:
                break
            futures.append(self.pool.submit(self._work, payload))
        wait(futures, timeout=60)


class SidecarServer:
    """Threaded TCP listener sharing one dispatcher and worker pool."""

    def __init__(self, config: ServerConfig, host: str = "127.0.0.1", port: int = 0):
        self.config = config
        self.dispatcher = Dispatcher(config)
        self.pool = ThreadPoolExecutor(max_workers=config.max_concurrent)
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self.host, self.port = self._sock.getsockname()[:2]
        self._closing = False
        self._accept_thread: Optional[threading.Thread] = None

    @property
    def endpoint(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    def start(self) -> "SidecarServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        log.info("listening on %s", self.endpoint)
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._closing:
                self._accept_thread.join(timeout=1.0)
                if not self._accept_thread.is_alive():
                    return
        except KeyboardInterrupt:
            log.info("interrupted; shutting down")
        finally:
            self.close()

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            log.info("connection from %s:%d", *addr[:2])
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            rfile = conn.makefile("rb")
            wfile = conn.makefile("wb")
            try:
                Connection(rfile, wfile, self.dispatcher, self.pool).serve()
            finally:
                for stream in (wfile, rfile):
                    try:
                        stream.close()
                    except OSError:
                        pass

    def close(self) -> None:
        self._closing = True
        if self._accept_thread is not None and self._accept_thread.is_alive():
            if threading.current_thread() is not self._accept_thread:
                self._accept_thread.join(timeout=5)
        try:
            self._sock.close()
        except OSError:
            pass
        self.pool.shutdown(wait=False)


def serve_stdio(config: ServerConfig, rfile: BinaryIO, wfile: BinaryIO) -> None:
    dispatcher = Dispatcher(config)
    pool = ThreadPoolExecutor(max_workers=config.max_concurrent)
    try:
        Connection(rfile, wfile, dispatcher, pool).serve()
    finally:
        pool.shutdown(wait=False)
