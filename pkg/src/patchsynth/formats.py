"""File formats: portable graymaps (P2/P5) and MNIST IDX files."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def to_bytes(img) -> np.ndarray:
    """Map [0, 1] intensities to 8-bit values: ``round(255 * clamp(v, 0, 1))``."""
    return np.rint(255.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_pgm(path, img, binary: bool = True) -> None:
    data = to_bytes(img)
    if data.ndim != 2:
        raise ValueError(f"PGM holds a single 2-D image, got shape {data.shape}")
    h, w = data.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


def _pgm_tokens(buf: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise IngestionError("truncated PGM header", offset=pos)
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 graymap and return intensities scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise IngestionError(f"{path}: not a PGM file (magic {magic!r})", offset=0)
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise IngestionError(f"{path}: bad maxval {maxval}", offset=pos)
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        need = w * h * dtype.itemsize
        if len(buf) - pos < need:
            raise IngestionError(
                f"{path}: expected {need} pixel bytes, found {len(buf) - pos}", offset=len(buf)
            )
        data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    else:
        values = buf[pos:].split()
        if len(values) < w * h:
            raise IngestionError(f"{path}: expected {w * h} pixel values, found {len(values)}", offset=len(buf))
        data = np.array([int(v) for v in values[: w * h]])
    return data.reshape(h, w).astype(np.float64) / maxval


def _read_header(buf: bytes, path, magic: int, ndims: int):
    size = 4 * (1 + ndims)
    if len(buf) < size:
        raise IngestionError(f"{path}: header needs {size} bytes, file has {len(buf)}", offset=len(buf))
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise IngestionError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack(">" + "I" * ndims, buf[4:size]), size


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX3 image file into a ``(count, rows, cols)`` uint8 array."""
    buf = Path(path).read_bytes()
    (count, rows, cols), start = _read_header(buf, path, IDX_IMAGES_MAGIC, 3)
    expected = start + count * rows * cols
    if len(buf) < expected:
        raise IngestionError(
            f"{path}: truncated, expected {expected} bytes but file has {len(buf)}", offset=len(buf)
        )
    return np.frombuffer(buf, np.uint8, count * rows * cols, start).reshape(count, rows, cols).copy()


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,), start = _read_header(buf, path, IDX_LABELS_MAGIC, 1)
    expected = start + count
    if len(buf) < expected:
        raise IngestionError(
            f"{path}: truncated, expected {expected} bytes but file has {len(buf)}", offset=len(buf)
        )
    return np.frombuffer(buf, np.uint8, count, start).copy()


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c))
        f.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())
