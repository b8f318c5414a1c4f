"""Wire protocol for out-of-process model backends.

Framing: each message is a 4-byte big-endian unsigned payload length
followed by that many bytes of UTF-8 JSON.  JSON is serialized
canonically (compact separators, lexicographically sorted keys,
ensure_ascii off) so independent implementations produce identical
bytes for identical messages.

Requests:  {"id": u64, "op": <op>, "args": {...}}
Responses: {"id": u64, "ok": true,  "result": {...}}
         | {"id": u64, "ok": false, "error": {"type": str, "message": str}}

Ops: handshake, embed_text, embed_image, segment, encode, decode,
predict_noise.  Responses may arrive out of request order; clients
correlate by id.  Tensors transit as base64 of little-endian raw bytes:
{"dtype": "f32"|"u8", "shape": [...], "data": base64}.  Images are f32
tensors of shape (H, W, 3); masks are u8 tensors of shape (H, W) with
values 0/1.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import BinaryIO, Optional

import numpy as np

from ..core import BinaryMask, Image
from ..errors import FramingError

HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 256 * 1024 * 1024

OPS = (
    "handshake", "embed_text", "embed_image", "segment",
    "encode", "decode", "predict_noise",
)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def dumps_canonical(obj) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def write_frame(stream: BinaryIO, payload: bytes) -> None:
    if len(payload) > MAX_FRAME_BYTES:
        raise FramingError(f"frame of {len(payload)} bytes exceeds limit")
    stream.write(HEADER.pack(len(payload)) + payload)
    stream.flush()


def read_frame(stream: BinaryIO) -> Optional[bytes]:
    """Read one frame; returns None on clean EOF before a header byte."""
    header = _read_exact(stream, HEADER.size, allow_eof=True)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise FramingError(f"declared frame length {length} exceeds limit")
    payload = _read_exact(stream, length, allow_eof=False)
    return payload


def _read_exact(stream: BinaryIO, n: int, allow_eof: bool) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            if allow_eof and remaining == n:
                return None
            raise FramingError(f"stream truncated; wanted {remaining} more bytes")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def encode_tensor(arr: np.ndarray, dtype: str = "f32") -> dict:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported wire dtype {dtype!r}")
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    return {
        "dtype": dtype,
        "shape": [int(s) for s in data.shape],
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_tensor(obj, expect_dtype: Optional[str] = None) -> np.ndarray:
    if not isinstance(obj, dict):
        raise FramingError("tensor payload must be an object")
    dtype = obj.get("dtype")
    if dtype not in _DTYPES:
        raise FramingError(f"unsupported tensor dtype {dtype!r}")
    if expect_dtype is not None and dtype != expect_dtype:
        raise FramingError(f"expected dtype {expect_dtype!r}, got {dtype!r}")
    shape = obj.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FramingError(f"bad tensor shape {shape!r}")
    try:
        raw = base64.b64decode(obj.get("data", ""), validate=True)
    except Exception as exc:
        raise FramingError(f"tensor data is not valid base64: {exc}") from exc
    np_dtype = _DTYPES[dtype]
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != count * np_dtype.itemsize:
        raise FramingError(
            f"tensor byte length {len(raw)} != shape product {count} x {np_dtype.itemsize}"
        )
    return np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()


def encode_image(image: Image) -> dict:
    return encode_tensor(image.data, "f32")


def decode_image(obj) -> Image:
    arr = decode_tensor(obj, "f32")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FramingError(f"image tensor must be (H, W, 3), got {arr.shape}")
    return Image(np.clip(arr, 0.0, 1.0))


def encode_mask(mask: BinaryMask) -> dict:
    return encode_tensor(mask.data, "u8")


def decode_mask(obj) -> BinaryMask:
    arr = decode_tensor(obj)
    if arr.ndim != 2:
        raise FramingError(f"mask tensor must be (H, W), got shape {arr.shape}")
    if arr.dtype == _DTYPES["f32"]:
        return BinaryMask.from_soft(arr)
    return BinaryMask((arr != 0).astype(np.uint8))


def make_request(request_id: int, op: str, args: dict) -> bytes:
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}")
    return dumps_canonical({"id": int(request_id), "op": op, "args": args})


def make_ok_response(request_id: int, result) -> bytes:
    return dumps_canonical({"id": int(request_id), "ok": True, "result": result})


def make_error_response(request_id: int, error_type: str, message: str) -> bytes:
    return dumps_canonical(
        {"id": int(request_id), "ok": False,
         "error": {"type": str(error_type), "message": str(message)}}
    )


def parse_request(payload: bytes) -> tuple[int, str, dict]:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"request payload is not valid JSON: {exc}") from exc
    if not isinstance(msg, dict):
        raise FramingError("request must be a JSON object")
    request_id = msg.get("id")
    if not isinstance(request_id, int) or request_id < 0:
        raise FramingError(f"bad request id {request_id!r}")
    op = msg.get("op")
    if op not in OPS:
        raise FramingError(f"unknown op {op!r}")
    args = msg.get("args", {})
    if not isinstance(args, dict):
        raise FramingError("request args must be an object")
    return request_id, op, args


def parse_response(payload: bytes) -> tuple[int, bool, object]:
    """Returns (id, ok, result-or-error-dict)."""
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"response payload is not valid JSON: {exc}") from exc
    if not isinstance(msg, dict):
        raise FramingError("response must be a JSON object")
    request_id = msg.get("id")
    if not isinstance(request_id, int):
        raise FramingError(f"bad response id {request_id!r}")
    ok = msg.get("ok")
    if ok is True:
        return request_id, True, msg.get("result")
    if ok is False:
        err = msg.get("error")
        if not isinstance(err, dict) or "type" not in err or "message" not in err:
            raise FramingError(f"malformed error object {err!r}")
        return request_id, False, err
    raise FramingError(f"response 'ok' must be a boolean, got {ok!r}")
