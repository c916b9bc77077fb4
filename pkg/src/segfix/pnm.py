"""Binary PGM (P5) and PPM (P6) reading and writing."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .modelio import write_bytes_atomic


class PNMError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the first raster byte.
    """
    out = []
    pos = 0
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMError(f"truncated header at byte {pos}")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PNMError(f"missing raster separator at byte {pos}")
    return out, pos + 1


def read_raw(path) -> tuple[np.ndarray, int]:
    """Return ``(array, maxval)``; the array is (h, w) for PGM or (3, h, w) for PPM."""
    with open(path, "rb") as fh:
        data = fh.read()
    toks, pos = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported magic {magic!r} (only P5/P6)")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PNMError(f"{path}: malformed header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PNMError(f"{path}: invalid dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    if len(data) - pos < need:
        raise PNMError(f"{path}: raster truncated ({len(data) - pos} of {need} bytes)")
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    arr = arr.astype(np.int64)
    if channels == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1), maxval
    return arr.reshape(h, w), maxval


def read_image(path) -> np.ndarray:
    """Read a PGM or PPM as a (c, h, w) float64 tensor scaled to [0, 1]."""
    arr, maxval = read_raw(path)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.astype(np.float64) / maxval


def read_labels(path) -> np.ndarray:
    """Read a PGM whose gray levels are integer labels."""
    arr, _ = read_raw(path)
    if arr.ndim != 2:
        raise PNMError(f"{path}: label maps must be grayscale PGM")
    return arr


def encode_pgm(values: np.ndarray, maxval: int = 255) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D array, got shape {values.shape}")
    h, w = values.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.clip(values, 0, maxval).astype(dtype).tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    """Encode a (3, h, w) tensor in [0, 1] as 8-bit P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"PPM needs a (3, h, w) tensor, got shape {image.shape}")
    _, h, w = image.shape
    q = np.clip(np.rint(image * 255.0), 0, 255).astype("u1")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def encode_gray(image: np.ndarray) -> bytes:
    """Encode a (h, w) or (1, h, w) tensor in [0, 1] as 8-bit P5."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    return encode_pgm(np.rint(np.clip(image, 0.0, 1.0) * 255.0))


def write_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("label values must lie in [0, 255]")
    write_bytes_atomic(path, encode_pgm(labels))


def write_image(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 3:
        write_bytes_atomic(path, encode_ppm(image))
    else:
        write_bytes_atomic(path, encode_gray(image))
