"""FPYR container writer (and a reader used for post-write self-checks).

Layout, little-endian: magic ``FPYR``, version u32=1, num_scales u32=4,
four {C, H, W} u32 triples, then four float32 blocks in C x H x W
row-major order. This mirrors the consumer's published format byte for
byte; the files are the interface between the two packages.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ExportError

MAGIC = b"FPYR"
VERSION = 1
NUM_SCALES = 4


def write_fpyr(path: str, scales: list[np.ndarray]) -> None:
    """Atomically write one pyramid; scales are [C, H, W] float arrays."""
    if len(scales) != NUM_SCALES:
        raise ExportError(f"pyramid must have {NUM_SCALES} scales, got {len(scales)}")
    for i, s in enumerate(scales):
        if s.ndim != 3:
            raise ExportError(f"scale {i} must be [C, H, W], got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ExportError(f"scale {i} contains non-finite values")

    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<II", VERSION, NUM_SCALES)
    for s in scales:
        payload += struct.pack("<III", *s.shape)
    for s in scales:
        payload += np.ascontiguousarray(s, dtype="<f4").tobytes()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".fpyr.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    # header/shape self-check on the bytes actually on disk
    shapes = read_fpyr_header(path)
    if shapes != [tuple(s.shape) for s in scales]:
        raise ExportError(f"{path}: post-write header mismatch: {shapes}")


def read_fpyr_header(path: str) -> list[tuple[int, int, int]]:
    with open(path, "rb") as f:
        head = f.read(12 + 12 * NUM_SCALES)
    if head[:4] != MAGIC:
        raise ExportError(f"{path}: bad magic {head[:4]!r}")
    version, num_scales = struct.unpack_from("<II", head, 4)
    if version != VERSION or num_scales != NUM_SCALES:
        raise ExportError(f"{path}: unexpected version/scales {version}/{num_scales}")
    return [struct.unpack_from("<III", head, 12 + 12 * i) for i in range(NUM_SCALES)]
