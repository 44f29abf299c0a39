"""Manifest parsing, image decoding, preprocessing, batching.

Manifests are headerless CSV lines ``filename,score`` with scores in [1, 5].
The mandatory image format is binary PPM (P6, maxval 255); PNG and friends
work through the same decode call when pillow is installed. Resizing is
bilinear with half-pixel center alignment. A seeded procedural image
generator stands in for real data at desk scale: each image mixes a smooth
random field (made left-right symmetric to a controlled degree) with
high-frequency texture noise, and its score is a fixed smooth function of
those two knobs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    ContractError,
    DecodeError,
    DimensionError,
    FormatError,
    NumericError,
    ParseError,
    ValidationError,
)
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SCORE_MIN = 1.0
SCORE_MAX = 5.0


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    score: float


@dataclass
class PreprocessConfig:
    target_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    flip_probability: float = 0.5  # training only

    def validate(self) -> None:
        if any(s <= 0 for s in self.std):
            raise ValidationError(f"std components must be positive: {self.std}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValidationError(f"flip probability outside [0, 1]: {self.flip_probability}")
        if self.target_size < 1:
            raise ValidationError("target size must be >= 1")


@dataclass
class Batch:
    images: Tensor  # [b, 3, s, s]
    scores: Tensor  # [b]

    def __post_init__(self):
        if self.images.shape[0] < 1:
            raise ContractError("empty batch")
        if not np.isfinite(self.images.data).all():
            raise NumericError("batch contains non-finite pixels")


# ---------------------------------------------------------------------------
# manifest

def load_manifest(path: str, root_dir: str | None = None) -> list[ManifestRecord]:
    """Parse ``filename,score`` lines in file order.

    With ``root_dir`` the stored paths are joined onto it; otherwise they
    stay as written.
    """
    records: list[ManifestRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            name, sep, score_text = line.rpartition(",")
            if not sep or not name:
                raise ParseError(f"{path}:{lineno}: expected 'filename,score', got {line!r}")
            try:
                score = float(score_text)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad score {score_text!r}") from None
            if not SCORE_MIN <= score <= SCORE_MAX:
                raise ValidationError(
                    f"{path}:{lineno}: score {score} outside [{SCORE_MIN}, {SCORE_MAX}]"
                )
            if root_dir is not None:
                name = os.path.join(root_dir, name)
            records.append(ManifestRecord(image_path=name, score=score))
    return records


def write_manifest(path: str, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.image_path},{r.score:.4f}\n")


# ---------------------------------------------------------------------------
# PPM (P6) codec

def decode_ppm(data: bytes) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> uint8 [H, W, 3]."""
    if data[:2] != b"P6":
        raise FormatError("not a P6 PPM file")
    pos = 2
    fields: list[int] = []

    def skip_ws(p: int) -> int:
        while p < len(data):
            if data[p:p + 1].isspace():
                p += 1
            elif data[p:p + 1] == b"#":
                while p < len(data) and data[p] not in (0x0A, 0x0D):
                    p += 1
            else:
                break
        return p

    while len(fields) < 3:
        pos = skip_ws(pos)
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated PPM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise DecodeError(f"bad PPM header token {data[start:pos]!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise DecodeError(f"PPM raster truncated: {len(raster)} of {expected} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DimensionError(f"encode_ppm needs uint8 [H, W, 3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_ppm(path: str, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def decode_image(path: str) -> np.ndarray:
    """Decode to uint8 [H, W, 3]; P6 natively, anything else via pillow."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DecodeError(f"cannot read {path}: {e}") from None
    if data[:2] == b"P6":
        return decode_ppm(data)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError(
            f"{path}: not a P6 PPM and pillow is not installed for other formats"
        ) from None
    import io

    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.mode != "RGB":
                raise FormatError(f"{path}: expected RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except Exception as e:
        raise DecodeError(f"{path}: undecodable image ({e})") from None


# ---------------------------------------------------------------------------
# preprocessing

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of [H, W, C] with half-pixel center alignment:
    src = (dst + 0.5) * in/out - 0.5, edges clamped."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def coords(n_out: int, n_in: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
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


def normalize(img01: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Per-channel (v - mean) / std on a [H, W, 3] image in [0, 1]."""
    mean = np.asarray(cfg.mean, dtype=img01.dtype)
    std = np.asarray(cfg.std, dtype=img01.dtype)
    return (img01 - mean) / std


def denormalize(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=img.dtype)
    std = np.asarray(cfg.std, dtype=img.dtype)
    return img * std + mean


def load_and_preprocess(
    record: ManifestRecord,
    cfg: PreprocessConfig,
    root_dir: str | None = None,
) -> np.ndarray:
    """Decode, resize to target, normalize; returns float32 [3, s, s]."""
    path = record.image_path if root_dir is None else os.path.join(root_dir, record.image_path)
    raw = decode_image(path)
    img = raw.astype(np.float32) / 255.0
    img = resize_bilinear(img, cfg.target_size, cfg.target_size)
    img = normalize(img, cfg)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def augment_flip(img: np.ndarray, rng: np.random.Generator, probability: float = 0.5) -> np.ndarray:
    """Reverse columns of a [3, H, W] image with the given probability.

    One draw is consumed from ``rng`` either way, so downstream decisions
    do not depend on the outcome.
    """
    flipped = rng.random() < probability
    return np.ascontiguousarray(img[:, :, ::-1]) if flipped else img


# ---------------------------------------------------------------------------
# batching

def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order as a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0x51]).permutation(n)


def batch_iterator(
    records: Sequence[ManifestRecord],
    cfg: PreprocessConfig,
    batch_size: int,
    shuffle: bool,
    seed: int,
    *,
    epoch: int = 0,
    train: bool = False,
    root_dir: str | None = None,
) -> Iterator[Batch]:
    """Yield batches covering every record exactly once; the final partial
    batch is emitted. Augmentation (train only) draws one flip decision per
    image from a stream keyed by (seed, epoch)."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(records)
    if n == 0:
        return
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    flip_rng = np.random.default_rng([seed, epoch, 0xF11])

    imgs: list[np.ndarray] = []
    scores: list[float] = []
    for idx in order:
        rec = records[int(idx)]
        img = load_and_preprocess(rec, cfg, root_dir=root_dir)
        if train:
            img = augment_flip(img, flip_rng, cfg.flip_probability)
        imgs.append(img)
        scores.append(rec.score)
        if len(imgs) == batch_size:
            yield Batch(
                images=Tensor(np.stack(imgs)),
                scores=Tensor(np.asarray(scores, dtype=np.float32)),
            )
            imgs, scores = [], []
    if imgs:
        yield Batch(
            images=Tensor(np.stack(imgs)),
            scores=Tensor(np.asarray(scores, dtype=np.float32)),
        )


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticSample:
    image: np.ndarray  # uint8 [H, W, 3]
    score: float
    symmetry: float
    texture: float


def synth_image(index: int, seed: int, size: int = 224) -> SyntheticSample:
    """Procedural image whose score is a smooth function of two injected
    knobs: left-right symmetry degree and texture amplitude."""
    rng = np.random.default_rng([seed, index])
    symmetry = float(rng.uniform())
    texture = float(rng.uniform())

    grid = 14
    base = rng.normal(size=(grid, grid, 3))
    base = resize_bilinear(base, size, size)
    mirrored = 0.5 * (base + base[:, ::-1])
    smooth = (1.0 - symmetry) * base + symmetry * mirrored

    noise = rng.uniform(-1.0, 1.0, size=(size, size, 3))
    pixels = 0.5 + 0.28 * smooth + 0.45 * texture * noise
    img = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)

    score = SCORE_MIN + (SCORE_MAX - SCORE_MIN) * (0.5 * symmetry + 0.5 * texture)
    return SyntheticSample(image=img, score=score, symmetry=symmetry, texture=texture)


def generate_synthetic_dataset(
    out_dir: str, n: int, seed: int, size: int = 224
) -> list[ManifestRecord]:
    """Write n PPM images plus manifest.csv under ``out_dir``; returns the
    parsed records (paths relative to ``out_dir``)."""
    if n < 0:
        raise ContractError("n must be non-negative")
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for i in range(n):
        sample = synth_image(i, seed, size)
        name = os.path.join("images", f"img{i:04d}.ppm")
        write_ppm(os.path.join(out_dir, name), sample.image)
        records.append(ManifestRecord(image_path=name, score=round(sample.score, 4)))
    write_manifest(os.path.join(out_dir, "manifest.csv"), records)
    return records
