"""Image loading and preprocessing, matched to the consumer's pipeline:
resize to 224 x 224 (bilinear, half-pixel centers) and normalize with the
ImageNet mean/std. Binary PPM (P6) decodes natively; other formats go
through pillow when present.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .errors import InputError

IMAGE_SIZE = 224
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def read_manifest(path: str) -> list[tuple[str, float]]:
    """Headerless ``filename,score`` lines; order preserved."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            name, sep, score = line.rpartition(",")
            if not sep or not name:
                raise InputError(f"{path}:{lineno}: expected 'filename,score'")
            try:
                rows.append((name, float(score)))
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad score {score!r}") from None
    return rows


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise InputError("not a P6 PPM")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PPM header")
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise InputError(f"only maxval 255 supported, got {maxval}")
    pos += 1
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise InputError("PPM raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def load_image(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from None
    if data[:2] == b"P6":
        return decode_ppm(data)
    try:
        from PIL import Image
    except ImportError:
        raise InputError(f"{path}: not P6 PPM and pillow unavailable") from None
    with Image.open(io.BytesIO(data)) as im:
        if im.mode != "RGB":
            raise InputError(f"{path}: expected RGB, got {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def coords(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    y0, y1, wy = coords(out_h, in_h)
    x0, x1, wx = coords(out_w, in_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(path: str, root_dir: str | None = None) -> np.ndarray:
    """Decode, resize, normalize; returns float32 [3, 224, 224]."""
    full = path if root_dir is None else os.path.join(root_dir, path)
    img = load_image(full).astype(np.float32) / 255.0
    img = _resize_bilinear(img, IMAGE_SIZE, IMAGE_SIZE)
    img = (img - MEAN) / STD
    return np.ascontiguousarray(img.transpose(2, 0, 1))
