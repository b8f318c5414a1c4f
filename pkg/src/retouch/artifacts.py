"""Atomic artifact writing: files land via temp + rename, never half-written."""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import BinaryMask, Image


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        # mkstemp creates 0600; give the artifact normal umask-driven bits
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def image_png_bytes(image: Image) -> bytes:
    raw = np.round(image.data.astype(np.float64) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(raw, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def mask_png_bytes(mask: BinaryMask) -> bytes:
    raw = (mask.data * np.uint8(255)).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(raw, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def image_file_bytes(image: Image, suffix: str) -> bytes:
    if suffix == ".png":
        return image_png_bytes(image)
    if suffix == ".ppm":
        raw = np.round(image.data.astype(np.float64) * 255.0).astype(np.uint8)
        return f"P6\n{image.width} {image.height}\n255\n".encode("ascii") + raw.tobytes()
    raise ValueError(f"unsupported image extension {suffix!r}")


def mask_file_bytes(mask: BinaryMask, suffix: str) -> bytes:
    if suffix == ".png":
        return mask_png_bytes(mask)
    if suffix == ".pgm":
        raw = (mask.data * np.uint8(255)).astype(np.uint8)
        return f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii") + raw.tobytes()
    raise ValueError(f"unsupported mask extension {suffix!r}")
