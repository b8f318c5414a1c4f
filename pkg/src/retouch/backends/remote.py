"""Client for remote model backends speaking the framed wire protocol.

One connection is multiplexed across threads: requests are written under
a lock and responses are matched to waiters by id, so servers may answer
out of order.  The transport is either a TCP endpoint ("tcp://host:port")
or a spawned subprocess's stdin/stdout ({"cmd": [argv...]}).
"""

from __future__ import annotations

import itertools
import logging
import socket
import subprocess
import threading
from typing import Optional

import numpy as np

from ..core import BinaryMask, Image, TextPrompt
from ..errors import FramingError, RemoteError, TransportError
from . import MAX_EMBEDDING_DIM, MAX_LATENT_STRIDE
from . import protocol

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0


class _Pending:
    __slots__ = ("event", "ok", "value")

    def __init__(self):
        self.event = threading.Event()
        self.ok = False
        self.value = None


class RemoteBackend:
    """All five backend contracts over one protocol connection."""

    def __init__(self, rfile, wfile, *, timeout: float = DEFAULT_TIMEOUT,
                 proc: Optional[subprocess.Popen] = None,
                 sock: Optional[socket.socket] = None):
        self._rfile = rfile
        self._wfile = wfile
        self._proc = proc
        self._sock = sock
        self._timeout = timeout
        self._ids = itertools.count(1)
        self._write_lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._pending_lock = threading.Lock()
        self._dead: Optional[Exception] = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

        hello = self.call("handshake", {})
        self.embedding_dim = _checked_int(hello, "embedding_dim", 1, MAX_EMBEDDING_DIM)
        self.latent_stride = _checked_int(hello, "latent_stride", 1, MAX_LATENT_STRIDE)
        self.models = hello.get("models", {})

    @classmethod
    def connect(cls, descriptor: dict, timeout: float = DEFAULT_TIMEOUT) -> "RemoteBackend":
        endpoint = descriptor.get("endpoint")
        if isinstance(endpoint, str) and endpoint.startswith("tcp://"):
            host, _, port = endpoint[len("tcp://"):].rpartition(":")
            try:
                sock = socket.create_connection((host, int(port)), timeout=timeout)
            except OSError as exc:
                raise TransportError(f"cannot connect to {endpoint}: {exc}") from exc
            sock.settimeout(None)
            return cls(sock.makefile("rb"), sock.makefile("wb"), timeout=timeout, sock=sock)
        cmd = endpoint.get("cmd") if isinstance(endpoint, dict) else None
        if cmd:
            try:
                proc = subprocess.Popen(
                    list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE
                )
            except OSError as exc:
                raise TransportError(f"cannot spawn backend {cmd!r}: {exc}") from exc
            return cls(proc.stdout, proc.stdin, timeout=timeout, proc=proc)
        raise ValueError(f"remote descriptor needs a tcp:// endpoint or a cmd list: {endpoint!r}")

    # -- transport ---------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            while True:
                payload = protocol.read_frame(self._rfile)
                if payload is None:
                    self._fail_all(TransportError("connection closed by server"))
                    return
                request_id, ok, value = protocol.parse_response(payload)
                self._deliver(request_id, ok, value)
        except FramingError as exc:
            self._fail_all(exc)
        except (OSError, ValueError) as exc:
            self._fail_all(TransportError(f"transport failure: {exc}"))

    def _deliver(self, request_id: int, ok: bool, value) -> None:
        with self._pending_lock:
            slot = self._pending.pop(request_id, None)
        if slot is None:
            log.warning("dropping response for unknown request id %d", request_id)
            return
        slot.ok = ok
        slot.value = value
        slot.event.set()

    def _fail_all(self, exc: Exception) -> None:
        self._dead = exc
        with self._pending_lock:
            pending = list(self._pending.values())
            self._pending.clear()
        for slot in pending:
            slot.ok = False
            slot.value = {"type": "transport", "message": str(exc)}
            slot.event.set()

    def call(self, op: str, args: dict) -> dict:
        if self._dead is not None:
            raise TransportError(f"connection is closed: {self._dead}")
        request_id = next(self._ids)
        slot = _Pending()
        with self._pending_lock:
            self._pending[request_id] = slot
        frame = protocol.make_request(request_id, op, args)
        try:
            with self._write_lock:
                protocol.write_frame(self._wfile, frame)
        except OSError as exc:
            with self._pending_lock:
                self._pending.pop(request_id, None)
            raise TransportError(f"write failed: {exc}") from exc
        if not slot.event.wait(self._timeout):
            with self._pending_lock:
                self._pending.pop(request_id, None)
            raise TransportError(f"request {op} timed out after {self._timeout}s")
        if not slot.ok:
            err = slot.value if isinstance(slot.value, dict) else {}
            err_type = err.get("type", "unknown")
            message = err.get("message", "")
            if err_type in ("transport",):
                raise TransportError(message)
            if err_type in ("framing",):
                raise FramingError(message)
            raise RemoteError(err_type, message)
        if not isinstance(slot.value, dict):
            raise FramingError(f"result payload must be an object, got {type(slot.value)}")
        return slot.value

    def close(self) -> None:
        self._dead = self._dead or TransportError("closed by client")
        # unblock the reader before touching the buffered files: closing a
        # buffered stream another thread is reading would deadlock
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.terminate()
            except OSError:
                pass
        if self._reader.is_alive() and threading.current_thread() is not self._reader:
            self._reader.join(timeout=5)
        for stream in (self._wfile, self._rfile):
            try:
                stream.close()
            except (OSError, ValueError):
                pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> "RemoteBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- contracts ---------------------------------------------------------

    def embed_text(self, text: str) -> np.ndarray:
        result = self.call("embed_text", {"text": text})
        return protocol.decode_tensor(result.get("embedding"), "f32")

    def embed_image(self, image: Image) -> np.ndarray:
        result = self.call("embed_image", {"image": protocol.encode_image(image)})
        return protocol.decode_tensor(result.get("embedding"), "f32")

    def segment(self, image: Image) -> list[BinaryMask]:
        result = self.call("segment", {"image": protocol.encode_image(image)})
        masks = result.get("masks")
        if not isinstance(masks, list):
            raise FramingError("segment result must carry a list of masks")
        return [protocol.decode_mask(m) for m in masks]

    def encode(self, image: Image) -> np.ndarray:
        result = self.call("encode", {"image": protocol.encode_image(image)})
        return protocol.decode_tensor(result.get("latent"), "f32")

    def decode(self, latent: np.ndarray) -> Image:
        result = self.call("decode", {"latent": protocol.encode_tensor(latent)})
        return protocol.decode_image(result.get("image"))

    def predict_noise(self, z_t, t: int, text: Optional[TextPrompt]) -> np.ndarray:
        args = {
            "z": protocol.encode_tensor(np.asarray(z_t, dtype=np.float32)),
            "t": int(t),
            "text": text.text if text is not None else None,
        }
        result = self.call("predict_noise", args)
        return protocol.decode_tensor(result.get("eps"), "f32")


def _checked_int(obj: dict, key: str, lo: int, hi: int) -> int:
    value = obj.get(key)
    if not isinstance(value, int) or not (lo <= value <= hi):
        raise FramingError(f"handshake {key}={value!r} outside [{lo}, {hi}]")
    return value
