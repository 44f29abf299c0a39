"""Frozen multi-scale prior stream.

A fixed, seeded four-stage encoder stands in for a large pretrained
feature extractor: each stage flattens non-overlapping 2x2 patches,
applies a fixed linear channel mix (Gaussian weights scaled by
1/sqrt(fan_in)), and a silu. Weights never require gradients and never
enter any optimizer. Externally computed pyramids enter through the FPYR
container with the same downstream handling, so real widths like
[320, 640, 1280, 1280] plug in without code changes.

FPYR layout (little-endian): magic ``FPYR``, version u32=1, num_scales
u32=4, four {C, H, W} u32 triples, then the four raw float32 blocks in
C x H x W row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, CorruptionError, DimensionError, FormatError, NumericError
from .tensor import Tensor

FPYR_MAGIC = b"FPYR"
FPYR_VERSION = 1
NUM_SCALES = 4
TOKEN_GRID = 7  # each scale pools to a 7x7 grid -> 4 * 49 = 196 tokens


@dataclass
class PriorEncoderConfig:
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    seed: int = 0

    def validate(self) -> None:
        if len(self.stage_channels) != NUM_SCALES:
            raise ContractError(
                f"encoder needs exactly {NUM_SCALES} stages, got {len(self.stage_channels)}"
            )
        if any(c < 1 for c in self.stage_channels):
            raise ContractError(f"stage channels must be positive: {self.stage_channels}")


@dataclass
class FeaturePyramid:
    """Four feature maps, coarser by stage; scales are [..., C, H, W]."""

    scales: list[np.ndarray]

    def __post_init__(self):
        if len(self.scales) != NUM_SCALES:
            raise ContractError(f"pyramid needs {NUM_SCALES} scales, got {len(self.scales)}")
        for i, s in enumerate(self.scales):
            if s.ndim < 3:
                raise DimensionError(f"scale {i} must be [..., C, H, W], got {s.shape}")
            if not np.isfinite(s).all():
                raise NumericError(f"scale {i} contains non-finite values")

    @property
    def channel_widths(self) -> tuple[int, ...]:
        return tuple(s.shape[-3] for s in self.scales)

    def check_halving(self, image_size: int) -> None:
        """Surrogate-encoder contract: spatial size halves every stage."""
        for i, s in enumerate(self.scales):
            want = image_size // 2 ** (i + 1)
            if s.shape[-2:] != (want, want):
                raise DimensionError(
                    f"scale {i} spatial {s.shape[-2:]} != expected ({want}, {want})"
                )


class FrozenEncoder:
    """Immutable after construction; weights are hidden behind a read-only
    view so nothing can mark them trainable by accident."""

    def __init__(self, cfg: PriorEncoderConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        weights = []
        c_in = 3
        for stage, c_out in enumerate(cfg.stage_channels):
            rng = np.random.default_rng([cfg.seed, stage])
            fan_in = 4 * c_in
            w = (rng.normal(size=(fan_in, c_out)) / math.sqrt(fan_in)).astype(dtype)
            w.setflags(write=False)
            weights.append(w)
            c_in = c_out
        self._weights = tuple(weights)

    @property
    def weights(self) -> tuple[np.ndarray, ...]:
        return self._weights

    def extract(self, images: np.ndarray) -> FeaturePyramid:
        """[b, 3, H, W] -> four [b, C_i, H/2^(i+1), W/2^(i+1)] maps.

        Pure numpy; no gradient graph is ever recorded here.
        """
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"extract needs [b, 3, H, W], got {images.shape}")
        height, width = images.shape[2:]
        if height % 2 ** NUM_SCALES or width % 2 ** NUM_SCALES:
            raise DimensionError(
                f"spatial size {height}x{width} not divisible by {2 ** NUM_SCALES}"
            )
        x = images.astype(self.dtype, copy=False)
        scales = []
        for w in self._weights:
            b, c, h, wd = x.shape
            # 2x2 patch flatten, (c, dy, dx) order, then fixed channel mix.
            x = x.reshape(b, c, h // 2, 2, wd // 2, 2)
            x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, h // 2, wd // 2, 4 * c)
            x = x @ w
            x = x * _sigmoid_np(x)  # silu
            x = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
            scales.append(x)
        return FeaturePyramid(scales=scales)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build_frozen_encoder(cfg: PriorEncoderConfig, dtype=np.float32) -> FrozenEncoder:
    return FrozenEncoder(cfg, dtype=dtype)


def extract_features(enc: FrozenEncoder, images: np.ndarray) -> FeaturePyramid:
    return enc.extract(images)


# ---------------------------------------------------------------------------
# pooled tokens

def adaptive_avg_pool(scale: np.ndarray, grid: int = TOKEN_GRID) -> np.ndarray:
    """[..., C, H, W] -> [..., grid*grid, C] by averaging adaptive bins
    (bin i spans floor(i*H/grid) .. ceil((i+1)*H/grid)); exact block mean
    when H and W are multiples of grid."""
    h, w = scale.shape[-2:]
    if h < grid or w < grid:
        raise DimensionError(f"spatial size {h}x{w} smaller than pooling grid {grid}")
    lead = scale.shape[:-3]
    c = scale.shape[-3]
    out = np.empty(lead + (grid * grid, c), dtype=scale.dtype)
    for gy in range(grid):
        y0, y1 = (gy * h) // grid, -(-((gy + 1) * h) // grid)
        for gx in range(grid):
            x0, x1 = (gx * w) // grid, -(-((gx + 1) * w) // grid)
            cell = scale[..., y0:y1, x0:x1].mean(axis=(-2, -1))
            out[..., gy * grid + gx, :] = cell
    return out


def init_scale_projections(
    rng: np.random.Generator,
    channel_widths: tuple[int, ...],
    d_model: int,
    dtype=np.float32,
) -> list[tuple[Tensor, Tensor]]:
    """Trainable per-scale linear maps (w, b) from C_i to the fusion width."""
    projections = []
    for c in channel_widths:
        w = (rng.normal(size=(c, d_model)) / math.sqrt(c)).astype(dtype)
        projections.append(
            (Tensor(w, requires_grad=True), Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True))
        )
    return projections


def pyramid_to_tokens(
    pyramid: FeaturePyramid,
    projections: list[tuple[Tensor, Tensor]],
    grid: int = TOKEN_GRID,
) -> Tensor:
    """Pool every scale to a grid and project each cell to the fusion
    width; scales concatenate in order, giving 4 * grid^2 tokens. Only the
    projections are trainable; the pooled activations enter as constants."""
    if len(projections) != len(pyramid.scales):
        raise ContractError("one projection per scale required")
    token_groups = []
    for s, (w, b) in zip(pyramid.scales, projections):
        if s.shape[-3] != w.shape[0]:
            raise DimensionError(
                f"scale width {s.shape[-3]} does not match projection input {w.shape[0]}"
            )
        pooled = adaptive_avg_pool(s, grid=grid).astype(w.dtype, copy=False)
        d_model = w.shape[1]
        ones = (1,) * (pooled.ndim - 2)
        tok = Tensor(pooled) @ w + b.reshape(ones + (1, d_model))
        token_groups.append(tok)
    return T.concat(token_groups, axis=-2)


# ---------------------------------------------------------------------------
# FPYR container

def export_features(pyramid: FeaturePyramid, path: str) -> None:
    """Write one unbatched pyramid ([C, H, W] scales) as an FPYR file."""
    for i, s in enumerate(pyramid.scales):
        if s.ndim != 3:
            raise DimensionError(f"export needs unbatched [C, H, W] scales, scale {i} is {s.shape}")
    with open(path, "wb") as f:
        f.write(FPYR_MAGIC)
        f.write(struct.pack("<II", FPYR_VERSION, NUM_SCALES))
        for s in pyramid.scales:
            f.write(struct.pack("<III", *s.shape))
        for s in pyramid.scales:
            f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


def import_features(path: str) -> FeaturePyramid:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FPYR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CorruptionError(f"{path}: header truncated")
    version, num_scales = struct.unpack_from("<II", blob, 4)
    if version != FPYR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if num_scales != NUM_SCALES:
        raise FormatError(f"{path}: expected {NUM_SCALES} scales, header says {num_scales}")
    offset = 12
    dims = []
    for _ in range(num_scales):
        if offset + 12 > len(blob):
            raise CorruptionError(f"{path}: dimension table truncated")
        dims.append(struct.unpack_from("<III", blob, offset))
        offset += 12
    scales = []
    for c, h, w in dims:
        count = c * h * w
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise CorruptionError(f"{path}: data truncated for scale {c}x{h}x{w}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(c, h, w)
        scales.append(arr.copy())
        offset += nbytes
    if offset != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - offset} trailing bytes")
    return FeaturePyramid(scales=scales)
