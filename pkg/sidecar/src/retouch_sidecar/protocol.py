"""Framed JSON wire protocol (server side).

Independent implementation of the retouch inference protocol: 4-byte
big-endian payload length, canonical UTF-8 JSON (compact separators,
sorted keys), tensors as base64 little-endian raw bytes.  Byte-level
behavior is pinned by a shared conformance corpus, so changes here must
keep responses identical to the reference implementation.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import BinaryIO, Optional

import numpy as np

HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 256 * 1024 * 1024

OPS = (
    "handshake", "embed_text", "embed_image", "segment",
    "encode", "decode", "predict_noise",
)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class ProtocolViolation(Exception):
    """Framing or message-structure violation; the connection must close."""


def dumps_canonical(obj) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def write_frame(stream: BinaryIO, payload: bytes) -> None:
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolViolation(f"frame of {len(payload)} bytes exceeds limit")
    stream.write(HEADER.pack(len(payload)) + payload)
    stream.flush()


def read_frame(stream: BinaryIO) -> Optional[bytes]:
    header = _read_exact(stream, HEADER.size, allow_eof=True)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolViolation(f"declared frame length {length} exceeds limit")
    return _read_exact(stream, length, allow_eof=False)


def _read_exact(stream: BinaryIO, n: int, allow_eof: bool) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            if allow_eof and remaining == n:
                return None
            raise ProtocolViolation(f"stream truncated; wanted {remaining} more bytes")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def encode_tensor(arr: np.ndarray, dtype: str = "f32") -> dict:
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    return {
        "dtype": dtype,
        "shape": [int(s) for s in data.shape],
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_tensor(obj, expect_dtype: Optional[str] = None) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ProtocolViolation("tensor payload must be an object")
    dtype = obj.get("dtype")
    if dtype not in _DTYPES:
        raise ProtocolViolation(f"unsupported tensor dtype {dtype!r}")
    if expect_dtype is not None and dtype != expect_dtype:
        raise ProtocolViolation(f"expected dtype {expect_dtype!r}, got {dtype!r}")
    shape = obj.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise ProtocolViolation(f"bad tensor shape {shape!r}")
    try:
        raw = base64.b64decode(obj.get("data", ""), validate=True)
    except Exception as exc:
        raise ProtocolViolation(f"tensor data is not valid base64: {exc}") from exc
    np_dtype = _DTYPES[dtype]
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != count * np_dtype.itemsize:
        raise ProtocolViolation(
            f"tensor byte length {len(raw)} != shape product {count} x {np_dtype.itemsize}"
        )
    return np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()


def decode_image(obj) -> np.ndarray:
    """Unit-range (H, W, 3) float32 raster; out-of-range values are clamped."""
    arr = decode_tensor(obj, "f32")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ProtocolViolation(f"image tensor must be (H, W, 3), got {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def parse_request(payload: bytes) -> tuple[int, str, dict]:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"request payload is not valid JSON: {exc}") from exc
    if not isinstance(msg, dict):
        raise ProtocolViolation("request must be a JSON object")
    request_id = msg.get("id")
    if not isinstance(request_id, int) or request_id < 0:
        raise ProtocolViolation(f"bad request id {request_id!r}")
    op = msg.get("op")
    if op not in OPS:
        raise ProtocolViolation(f"unknown op {op!r}")
    args = msg.get("args", {})
    if not isinstance(args, dict):
        raise ProtocolViolation("request args must be an object")
    return request_id, op, args


def make_ok_response(request_id: int, result) -> bytes:
    return dumps_canonical({"id": int(request_id), "ok": True, "result": result})


def make_error_response(request_id: int, error_type: str, message: str) -> bytes:
    return dumps_canonical(
        {"id": int(request_id), "ok": False,
         "error": {"type": str(error_type), "message": str(message)}}
    )
