"""Image and mask file I/O: PNG, binary PPM (P6) and PGM (P5).

Reads map 8-bit values to v/255; writes map to round(v*255), so a
write/read round trip reproduces the 8-bit-quantized raster exactly.
Grayscale mask files use 0 <-> 0 and 255 <-> 1; any value >= 128 reads
as 1 to tolerate anti-aliased fixture masks.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .core import BinaryMask, Image
from .errors import FileFormatError

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def quantize8(image: Image) -> Image:
    """Snap values to the 8-bit grid (what a file round trip preserves)."""
    q = np.round(image.data * 255.0).astype(np.uint8)
    return Image(q.astype(np.float32) / np.float32(255.0))


def _to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(data, dtype=np.float64) * 255.0).astype(np.uint8)


def _from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def _read_pnm_header(buf: io.BufferedReader, path: str):
    """Parse a PNM header (magic, width, height, maxval); leaves buf at pixel data."""
    magic = buf.read(2)
    if magic not in (b"P5", b"P6"):
        raise FileFormatError(f"{path}: not a binary PGM/PPM file")

    fields = []
    while len(fields) < 3:
        ch = buf.read(1)
        if ch == b"":
            raise FileFormatError(f"{path}: truncated PNM header")
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = buf.read(1)
            continue
        if ch.isspace():
            continue
        token = ch
        while True:
            ch = buf.read(1)
            if ch == b"" or ch.isspace():
                break
            token += ch
        try:
            fields.append(int(token))
        except ValueError:
            raise FileFormatError(f"{path}: bad PNM header token {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FileFormatError(f"{path}: zero or negative PNM dimensions")
    if maxval != 255:
        raise FileFormatError(f"{path}: only 8-bit PNM supported (maxval {maxval})")
    return magic, width, height


def _read_pnm(path: str) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        magic, width, height = _read_pnm_header(f, path)
        channels = 3 if magic == b"P6" else 1
        expected = width * height * channels
        raw = f.read(expected)
        if len(raw) != expected:
            raise FileFormatError(f"{path}: truncated PNM pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return arr, channels


def _read_png_raw(path: str) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode == "RGBA":
                im = im.convert("RGB")  # alpha dropped
            if im.mode not in ("RGB", "L"):
                raise FileFormatError(f"{path}: unsupported PNG mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except FileFormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FileFormatError(f"{path}: unreadable PNG ({exc})") from exc


def _sniff(path: str) -> str:
    with open(path, "rb") as f:
        head = f.read(8)
    if head.startswith(_PNG_MAGIC):
        return "png"
    if head[:2] in (b"P5", b"P6"):
        return "pnm"
    raise FileFormatError(f"{path}: unsupported image format")


def read_image(path: str | os.PathLike) -> Image:
    """Read a PNG (8-bit RGB/RGBA) or binary PPM into a unit-range raster."""
    path = str(path)
    kind = _sniff(path)
    if kind == "png":
        raw = _read_png_raw(path)
        if raw.ndim == 2:
            raise FileFormatError(f"{path}: grayscale PNG is a mask, not an image")
    else:
        raw, channels = _read_pnm(path)
        if channels != 3:
            raise FileFormatError(f"{path}: PGM holds a mask, not an RGB image")
    if raw.shape[0] < 1 or raw.shape[1] < 1:
        raise FileFormatError(f"{path}: zero image dimensions")
    return Image(_from_uint8(raw))


def write_image(image: Image, path: str | os.PathLike) -> None:
    """Write as PNG or binary PPM depending on the file extension."""
    path = str(path)
    ext = Path(path).suffix.lower()
    raw = _to_uint8(image.data)
    if ext == ".png":
        PILImage.fromarray(raw, mode="RGB").save(path, format="PNG")
    elif ext == ".ppm":
        header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
        with open(path, "wb") as f:
            f.write(header + raw.tobytes())
    else:
        raise FileFormatError(f"{path}: unsupported output extension {ext!r}")


def read_mask(path: str | os.PathLike) -> BinaryMask:
    """Read a grayscale PNG or binary PGM; values >= 128 become 1."""
    path = str(path)
    kind = _sniff(path)
    if kind == "png":
        raw = _read_png_raw(path)
        if raw.ndim == 3:
            raw = raw[:, :, 0]
    else:
        raw, channels = _read_pnm(path)
        if channels != 1:
            raise FileFormatError(f"{path}: PPM holds an image, not a mask")
        raw = raw[:, :, 0]
    return BinaryMask((raw >= 128).astype(np.uint8))


def write_mask(mask: BinaryMask, path: str | os.PathLike) -> None:
    """Write a mask as grayscale PNG or binary PGM (0/255)."""
    path = str(path)
    ext = Path(path).suffix.lower()
    raw = (mask.data * np.uint8(255)).astype(np.uint8)
    if ext == ".png":
        PILImage.fromarray(raw, mode="L").save(path, format="PNG")
    elif ext == ".pgm":
        header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
        with open(path, "wb") as f:
            f.write(header + raw.tobytes())
    else:
        raise FileFormatError(f"{path}: unsupported mask extension {ext!r}")
