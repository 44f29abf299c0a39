"""Bidirectional selective-scan sequence stream.

The core primitive is the first-order linear recurrence

    h_t = a_t * h_{t-1} + b_t,   h_0 = 0   (elementwise)

evaluated in time linear in the sequence length. The optimized path
(`linear_recurrence_blocked`) splits the sequence into ~sqrt(L) chunks,
scans inside all chunks in lockstep, chains the per-chunk carries, and
applies them; it is algebraically identical to the sequential form.
`linear_recurrence_reference` keeps the plain per-step loop as the oracle.

On top of the recurrence sits the input-conditioned scan: per step, the
decay, input and readout coefficients are all functions of the current
input, which is what lets the state update keep or drop information
depending on content. The skip term routes the input straight to the
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor, apply_op


# ---------------------------------------------------------------------------
# linear recurrence

def linear_recurrence_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sequential oracle: one explicit step per time index, axis 0 is time."""
    if a.shape != b.shape:
        raise DimensionError(f"coefficient/input shapes differ: {a.shape} vs {b.shape}")
    out = np.empty_like(b)
    h = np.zeros(b.shape[1:], dtype=b.dtype)
    for t in range(b.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def _scan_block(a2: np.ndarray, b2: np.ndarray, state: np.ndarray, chunk: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Chunked scan of one [m, width] block seeded with ``state``; returns
    (outputs, state after the last row). Chunked arrays are laid out
    time-major ([chunk, n_chunks, width]) so every step streams contiguous
    memory instead of striding across the whole buffer."""
    m, width = a2.shape
    if chunk is None:
        chunk = max(1, int(math.isqrt(m)))
    n_chunks = -(-m // chunk)
    pad = n_chunks * chunk - m
    if pad:
        zeros = np.zeros((pad, width), dtype=b2.dtype)
        a2 = np.concatenate([a2, zeros], axis=0)
        b2 = np.concatenate([b2, zeros], axis=0)
    a3 = np.ascontiguousarray(a2.reshape(n_chunks, chunk, width).swapaxes(0, 1))
    b3 = np.ascontiguousarray(b2.reshape(n_chunks, chunk, width).swapaxes(0, 1))

    # Local scans (from zero state) and running coefficient products,
    # all chunks in lockstep.
    local = np.empty_like(b3)
    prod = np.empty_like(a3)
    local[0] = b3[0]
    prod[0] = a3[0]
    for t in range(1, chunk):
        np.multiply(a3[t], local[t - 1], out=local[t])
        local[t] += b3[t]
        np.multiply(prod[t - 1], a3[t], out=prod[t])

    # Chain chunk-final states: carry_c = prod_end_c * carry_{c-1} + local_end_c.
    shifted = np.empty((n_chunks, width), dtype=b2.dtype)
    run = state
    last_prod, last_local = prod[-1], local[-1]
    for c in range(n_chunks):
        shifted[c] = run  # state entering chunk c
        run = last_prod[c] * run + last_local[c]

    out = local
    out += prod * shifted[None, :, :]
    out = np.ascontiguousarray(out.swapaxes(0, 1)).reshape(n_chunks * chunk, width)
    if pad:
        out = out[:m]
    return out, out[-1].copy()


def linear_recurrence_blocked(
    a: np.ndarray,
    b: np.ndarray,
    chunk: int | None = None,
    segment: int = 1024,
) -> np.ndarray:
    """Blocked scan over axis 0, semantically identical to the sequential form.

    The sequence is processed in fixed-size segments (bounded working set,
    so cost stays linear in length at any scale); inside a segment the
    chunked kernel needs only ~2*sqrt(segment) Python-level steps, with the
    per-step work vectorized across chunks.
    """
    if a.shape != b.shape:
        raise DimensionError(f"coefficient/input shapes differ: {a.shape} vs {b.shape}")
    if segment < 1:
        raise ContractError("segment must be >= 1")
    length = a.shape[0]
    if length == 0:
        return b.copy()
    rest = a.shape[1:]
    flat_a = a.reshape(length, -1)
    flat_b = b.reshape(length, -1)
    width = flat_a.shape[1]
    out = np.empty((length, width), dtype=b.dtype)
    state = np.zeros(width, dtype=b.dtype)
    for start in range(0, length, segment):
        stop = min(start + segment, length)
        out[start:stop], state = _scan_block(
            flat_a[start:stop], flat_b[start:stop], state, chunk
        )
    return out.reshape((length,) + rest)


def linear_recurrence(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable h_t = a_t * h_{t-1} + b_t with time on axis 0.

    Forward uses the blocked scan. The adjoint runs the same recurrence in
    reverse: with upstream grads g, s_t = g_t + a_{t+1} * s_{t+1}, then
    d(a_t) = s_t * h_{t-1} and d(b_t) = s_t.
    """
    if a.shape != b.shape:
        raise DimensionError(f"coefficient/input shapes differ: {a.shape} vs {b.shape}")
    h = linear_recurrence_blocked(a.data, b.data)
    a_data, h_data = a.data, h

    def back(g: np.ndarray):
        coeff = np.concatenate([np.zeros_like(a_data[:1]), a_data[:0:-1]], axis=0)
        s = linear_recurrence_blocked(coeff, g[::-1])[::-1]
        h_prev = np.concatenate([np.zeros_like(h_data[:1]), h_data[:-1]], axis=0)
        return s * h_prev, s.copy()

    return apply_op(h, (a, b), back)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ScanParams:
    """One direction's scan parameters.

    ``a_log`` parameterizes the state matrix as -exp(a_log), which keeps
    every decay factor in (0, 1) once multiplied by a positive step size.
    Projections are stored row-convention (applied as ``x @ w``).
    """

    a_log: Tensor      # [d_inner, d_state]
    skip: Tensor       # [d_inner], direct input-to-output term
    w_delta: Tensor    # [d_inner, d_inner]
    b_delta: Tensor    # [d_inner]
    w_b: Tensor        # [d_inner, d_state]
    w_c: Tensor        # [d_inner, d_state]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.a_log": self.a_log,
            f"{prefix}.skip": self.skip,
            f"{prefix}.w_delta": self.w_delta,
            f"{prefix}.b_delta": self.b_delta,
            f"{prefix}.w_b": self.w_b,
            f"{prefix}.w_c": self.w_c,
        }


@dataclass
class MambaBlockParams:
    """Pre-norm gated block: shared in/out projections, per-direction scans."""

    ln_gain: Tensor    # [d_model]
    ln_bias: Tensor    # [d_model]
    w_in: Tensor       # [d_model, 2*d_inner] -> (value, gate)
    w_out: Tensor      # [d_inner, d_model]
    fwd: ScanParams
    bwd: ScanParams

    @property
    def d_inner(self) -> int:
        return self.w_out.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.ln_gain": self.ln_gain,
            f"{prefix}.ln_bias": self.ln_bias,
            f"{prefix}.w_in": self.w_in,
            f"{prefix}.w_out": self.w_out,
        }
        out.update(self.fwd.named(f"{prefix}.fwd"))
        out.update(self.bwd.named(f"{prefix}.bwd"))
        return out


@dataclass
class VimConfig:
    """Sequence-stream dimensions. Desk-scale defaults; all overridable."""

    patch_size: int = 16
    d_model: int = 192
    depth: int = 4
    d_state: int = 16
    expand: int = 2
    pool: str = "mean"  # mean | last

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def validate(self, image_size: int) -> None:
        if image_size % self.patch_size:
            raise ContractError(
                f"image size {image_size} not divisible by patch size {self.patch_size}"
            )
        for field in ("patch_size", "d_model", "depth", "d_state", "expand"):
            if getattr(self, field) <= 0:
                raise ContractError(f"VimConfig.{field} must be positive")
        if self.pool not in ("mean", "last"):
            raise ContractError(f"unknown pool mode {self.pool!r}")


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    # solves softplus(x) = y for y > 0
    return y + np.log(-np.expm1(-y))


def init_scan_params(rng: np.random.Generator, d_inner: int, d_state: int, dtype) -> ScanParams:
    """Stable initialization: decay rates spread over [1, d_state], unit skip,
    step-size bias drawn so the initial step size is log-uniform in
    [1e-3, 1e-1], Gaussian projections scaled by 1/sqrt(fan_in).
    """
    a_row = np.log(np.linspace(1.0, d_state, d_state))
    a_log = np.tile(a_row, (d_inner, 1))
    delta_init = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_inner))
    scale = 1.0 / math.sqrt(d_inner)
    return ScanParams(
        a_log=Tensor(a_log.astype(dtype), requires_grad=True),
        skip=Tensor(np.ones(d_inner, dtype=dtype), requires_grad=True),
        w_delta=Tensor((rng.normal(size=(d_inner, d_inner)) * scale).astype(dtype), requires_grad=True),
        b_delta=Tensor(_softplus_inverse(delta_init).astype(dtype), requires_grad=True),
        w_b=Tensor((rng.normal(size=(d_inner, d_state)) * scale).astype(dtype), requires_grad=True),
        w_c=Tensor((rng.normal(size=(d_inner, d_state)) * scale).astype(dtype), requires_grad=True),
    )


def init_block_params(rng: np.random.Generator, cfg: VimConfig, dtype=np.float32) -> MambaBlockParams:
    dm, di = cfg.d_model, cfg.d_inner
    return MambaBlockParams(
        ln_gain=Tensor(np.ones(dm, dtype=dtype), requires_grad=True),
        ln_bias=Tensor(np.zeros(dm, dtype=dtype), requires_grad=True),
        w_in=Tensor((rng.normal(size=(dm, 2 * di)) / math.sqrt(dm)).astype(dtype), requires_grad=True),
        w_out=Tensor((rng.normal(size=(di, dm)) / math.sqrt(di)).astype(dtype), requires_grad=True),
        fwd=init_scan_params(rng, di, cfg.d_state, dtype),
        bwd=init_scan_params(rng, di, cfg.d_state, dtype),
    )


# ---------------------------------------------------------------------------
# selective scan

def selective_scan(x: Tensor, p: ScanParams, direction: str = "forward") -> Tensor:
    """Input-conditioned scan over ``x`` with time on axis -2.

    Per step t (all rows of the batch in parallel):

        delta_t = softplus(x_t @ w_delta + b_delta)            [d_inner]
        Abar_t  = exp(delta_t[:, None] * (-exp(a_log)))        [d_inner, d_state]
        Bx_t    = (delta_t * x_t)[:, None] * (x_t @ w_b)[None] [d_inner, d_state]
        h_t     = Abar_t * h_{t-1} + Bx_t
        y_t     = h_t @ (x_t @ w_c) + skip * x_t               [d_inner]

    ``direction="backward"`` runs the same machinery on the reversed
    sequence and re-reverses the output. Fully differentiable.
    """
    if direction not in ("forward", "backward"):
        raise ContractError(f"direction must be forward|backward, got {direction!r}")
    if x.ndim < 2:
        raise DimensionError(f"selective_scan needs [..., L, d_inner], got {x.shape}")
    d_inner, d_state = p.a_log.shape
    if x.shape[-1] != d_inner:
        raise DimensionError(f"input width {x.shape[-1]} != d_inner {d_inner}")
    if direction == "backward":
        x = T.flip(x, axis=-2)

    lead = x.shape[:-2]
    length = x.shape[-2]
    ones = (1,) * len(lead)

    delta = T.softplus(x @ p.w_delta + p.b_delta.reshape(ones + (1, d_inner)))
    b_proj = x @ p.w_b   # [..., L, d_state]
    c_proj = x @ p.w_c

    a_mat = T.neg(T.exp(p.a_log)).reshape(ones + (1, d_inner, d_state))
    a_bar = T.exp(delta.reshape(lead + (length, d_inner, 1)) * a_mat)
    bx = (delta * x).reshape(lead + (length, d_inner, 1)) * b_proj.reshape(lead + (length, 1, d_state))

    # Time-major flatten for the recurrence primitive.
    n_lead = len(lead)
    to_time = (n_lead,) + tuple(range(n_lead)) + (n_lead + 1, n_lead + 2)
    flat = (length, int(np.prod(lead, dtype=np.int64)) * d_inner * d_state)
    h = linear_recurrence(
        T.transpose(a_bar, to_time).reshape(flat),
        T.transpose(bx, to_time).reshape(flat),
    )
    from_time = tuple(range(1, n_lead + 1)) + (0, n_lead + 1, n_lead + 2)
    h = T.transpose(h.reshape((length,) + lead + (d_inner, d_state)), from_time)

    y = (h * c_proj.reshape(lead + (length, 1, d_state))).sum(axis=-1)
    y = y + x * p.skip.reshape(ones + (1, d_inner))
    if not np.isfinite(y.data).all():
        raise NumericError("selective scan produced non-finite values")
    if direction == "backward":
        y = T.flip(y, axis=-2)
    return y


def selective_scan_reference(x: np.ndarray, p: ScanParams, direction: str = "forward") -> np.ndarray:
    """Independent float64 oracle: explicit per-step state update for one
    unbatched sequence [L, d_inner]. Kept free of the Tensor graph and of
    the blocked recurrence so it can arbitrate both.
    """
    if direction not in ("forward", "backward"):
        raise ContractError(f"direction must be forward|backward, got {direction!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"reference scan takes [L, d_inner], got {x.shape}")
    if direction == "backward":
        x = x[::-1]
    w_delta = p.w_delta.data.astype(np.float64)
    b_delta = p.b_delta.data.astype(np.float64)
    w_b = p.w_b.data.astype(np.float64)
    w_c = p.w_c.data.astype(np.float64)
    skip = p.skip.data.astype(np.float64)
    a = -np.exp(p.a_log.data.astype(np.float64))

    d_inner, d_state = a.shape
    h = np.zeros((d_inner, d_state))
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        xt = x[t]
        delta = np.logaddexp(0.0, xt @ w_delta + b_delta)
        a_bar = np.exp(delta[:, None] * a)
        bx = (delta * xt)[:, None] * (xt @ w_b)[None, :]
        h = a_bar * h + bx
        out[t] = h @ (xt @ w_c) + skip * xt
    return out[::-1].copy() if direction == "backward" else out


# ---------------------------------------------------------------------------
# block and token plumbing

def mamba_block(x: Tensor, p: MambaBlockParams) -> Tensor:
    """Pre-norm, gated, bidirectional block with residual connection:

        u      = layer_norm(x)
        (v, z) = split(u @ w_in)
        y      = (scan_fwd(v) + scan_bwd(v)) * silu(z)
        out    = x + y @ w_out
    """
    di = p.d_inner
    u = T.layer_norm(x, p.ln_gain, p.ln_bias)
    uv = u @ p.w_in
    v = T.narrow(uv, -1, 0, di)
    z = T.narrow(uv, -1, di, di)
    y = selective_scan(v, p.fwd, "forward") + selective_scan(v, p.bwd, "backward")
    y = y * T.silu(z)
    return x + y @ p.w_out


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[b, c, H, W] -> [b, n_patches, c*p*p]; row-major patch grid, each
    patch flattened channel-major then row-major."""
    if images.ndim != 4:
        raise DimensionError(f"patchify needs [b, c, H, W], got {images.shape}")
    b, c, height, width = images.shape
    p = patch_size
    if height % p or width % p:
        raise DimensionError(f"spatial size {height}x{width} not divisible by patch {p}")
    gh, gw = height // p, width // p
    x = images.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def patch_embed(
    images: np.ndarray,
    w: Tensor,
    bias: Tensor,
    pos: Tensor | None,
    patch_size: int,
) -> Tensor:
    """Project flattened patches and add the learned positional table."""
    patches = patchify(images, patch_size)
    n_tokens, d_model = patches.shape[1], w.shape[1]
    tok = Tensor(patches.astype(w.dtype)) @ w + bias.reshape(1, 1, d_model)
    if pos is not None:
        if pos.shape != (n_tokens, d_model):
            raise DimensionError(
                f"positional table {pos.shape} != ({n_tokens}, {d_model})"
            )
        tok = tok + pos.reshape(1, n_tokens, d_model)
    return tok


def global_pool(tokens: Tensor, mode: str = "mean") -> Tensor:
    """Aggregate [..., L, d] token sequences to [..., d]."""
    if tokens.shape[-2] < 1:
        raise ContractError("global_pool needs at least one token")
    if mode == "mean":
        return tokens.mean(axis=-2)
    if mode == "last":
        length = tokens.shape[-2]
        picked = T.narrow(tokens, -2, length - 1, 1)
        return picked.reshape(tokens.shape[:-2] + (tokens.shape[-1],))
    raise ContractError(f"unknown pool mode {mode!r}")
