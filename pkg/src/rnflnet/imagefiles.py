"""Binary PNM (PGM/PPM) reading and writing, plus a minimal PNG encoder.

PNM keeps the pipeline dependency-free and byte-deterministic: P5 for
grayscale, P6 for RGB, maxval up to 65535 (two-byte samples are
big-endian per the format). Arrays cross this boundary as float64 in
[0, 1]. The PNG encoder exists only so SVG reports can embed raster
panels as data URIs; it writes one IDAT chunk with filter 0 scanlines.
"""

from __future__ import annotations

import base64
import struct
import zlib

import numpy as np


class ImageFormatError(ValueError):
    """File is not a readable binary PGM/PPM."""


def _read_pnm_tokens(data, count):
    """Yield header tokens, skipping whitespace and # comments."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ImageFormatError("truncated PNM header")
        ch = data[i:i + 1]
        if ch in b" \t\r\n":
            i += 1
            continue
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and data[j:j + 1] not in b" \t\r\n":
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # past the single whitespace after the last token


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) into float64 in [0, 1].

    Returns (H, W) for grayscale, (H, W, 3) for RGB.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM (magic {data[:2]!r})")
    tokens, offset = _read_pnm_tokens(data[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if not (0 < maxval < 65536):
        raise ImageFormatError(f"{path}: maxval {maxval} out of range")
    channels = 1 if data[:2] == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    if pixels.size != count:
        raise ImageFormatError(f"{path}: pixel payload truncated")
    img = pixels.astype(np.float64) / maxval
    if channels == 1:
        return img.reshape(height, width)
    return img.reshape(height, width, 3)


def _quantize(img, maxval=255):
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * maxval).astype("u1" if maxval <= 255 else ">u2")


def write_pgm(path, img):
    """Write a (H, W) array in [0, 1] as an 8-bit binary PGM."""
    arr = _quantize(img)
    if arr.ndim != 2:
        raise ImageFormatError(f"PGM needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, img):
    """Write a (H, W, 3) array in [0, 1] as an 8-bit binary PPM."""
    arr = _quantize(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"PPM needs a (H, W, 3) array, got shape {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# PNG for SVG embedding


def _png_chunk(tag, payload):
    body = tag + payload
    return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))


def png_bytes(img):
    """Encode a [0, 1] float array ((H, W) gray or (H, W, 3) RGB) as PNG."""
    arr = _quantize(img)
    if arr.ndim == 2:
        color_type = 0
        raw = arr[:, :, None]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type = 2
        raw = arr
    else:
        raise ImageFormatError(f"PNG needs (H, W) or (H, W, 3), got shape {arr.shape}")
    h, w = raw.shape[:2]
    scanlines = b"".join(b"\x00" + raw[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n"
            + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(scanlines, 9))
            + _png_chunk(b"IEND", b""))


def png_data_uri(img):
    return "data:image/png;base64," + base64.b64encode(png_bytes(img)).decode("ascii")
