"""Stream fusion and regression head, plus the assembled dual-stream model.

The global vector from the sequence stream queries the pooled prior tokens
through multi-head cross-attention; the attended context is concatenated
back onto the query (so the global vector survives attention collapse) and
a two-layer head regresses the score. Ablation wiring:

    cross_attention  both streams, attention fusion
    concat           both streams, mean-pool + linear instead of attention
    prior_only       pooled prior tokens straight into the head
    mamba_only       global vector straight into the head

Every instance owns the full parameter set regardless of mode; the unused
stream stays out of the graph, so its gradients are identically zero and
it is excluded from the trainable set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .prior import (
    FeaturePyramid,
    FrozenEncoder,
    PriorEncoderConfig,
    TOKEN_GRID,
    adaptive_avg_pool,
    init_scale_projections,
    pyramid_to_tokens,
)
from .ssm import VimConfig, init_block_params, mamba_block, global_pool, patchify
from .tensor import Tensor, no_grad

FUSION_MODES = ("cross_attention", "concat", "prior_only", "mamba_only")


@dataclass
class CrossAttentionParams:
    w_q: Tensor  # [d_model, d_attn]
    w_k: Tensor  # [d_model, d_attn]
    w_v: Tensor  # [d_model, d_attn]
    w_o: Tensor  # [d_attn, d_model]
    num_heads: int = 4

    def __post_init__(self):
        if self.w_q.shape[1] % self.num_heads:
            raise ConfigError(
                f"d_attn {self.w_q.shape[1]} not divisible by {self.num_heads} heads"
            )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_o": self.w_o,
        }


@dataclass
class MLPHeadParams:
    w1: Tensor  # [d_fused, d_hidden]
    b1: Tensor  # [d_hidden]
    w2: Tensor  # [d_hidden, 1]
    b2: Tensor  # [1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def cross_attention_fuse(
    g: Tensor,
    tokens: Tensor,
    p: CrossAttentionParams,
    return_weights: bool = False,
):
    """Fuse a [b, d_model] query vector with [b, n_tokens, d_model] tokens.

    Per head: one query row attends over all tokens with 1/sqrt(d_head)
    scaling; head contexts concatenate, project back to d_model, and the
    result is concatenated onto g, so the fused width is 2 * d_model.
    """
    if tokens.ndim != 3 or g.ndim != 2:
        raise DimensionError(f"expected g [b, d], tokens [b, n, d]; got {g.shape}, {tokens.shape}")
    if tokens.shape[-2] == 0:
        raise ContractError("cross-attention needs at least one token")
    batch, n_tokens = tokens.shape[0], tokens.shape[1]
    d_attn = p.w_q.shape[1]
    d_head = d_attn // p.num_heads

    q = (g @ p.w_q).reshape(batch, 1, d_attn)
    keys = tokens @ p.w_k
    values = tokens @ p.w_v

    contexts = []
    weights = []
    for h in range(p.num_heads):
        q_h = T.narrow(q, -1, h * d_head, d_head)
        k_h = T.narrow(keys, -1, h * d_head, d_head)
        v_h = T.narrow(values, -1, h * d_head, d_head)
        scores = (q_h @ T.swap_last(k_h)) * (1.0 / math.sqrt(d_head))
        alpha = T.softmax(scores, axis=-1)  # [b, 1, n_tokens]
        contexts.append(alpha @ v_h)
        weights.append(alpha.data.reshape(batch, n_tokens))
    context = T.concat(contexts, axis=-1).reshape(batch, d_attn) @ p.w_o
    fused = T.concat([g, context], axis=-1)
    if return_weights:
        return fused, np.stack(weights, axis=1)  # [b, heads, n_tokens]
    return fused


def concat_fuse(g: Tensor, tokens: Tensor, proj: Tensor) -> Tensor:
    """Mean-pool the tokens, concatenate with g, one linear map. No attention."""
    if tokens.ndim != 3 or g.ndim != 2:
        raise DimensionError(f"expected g [b, d], tokens [b, n, d]; got {g.shape}, {tokens.shape}")
    if tokens.shape[-2] == 0:
        raise ContractError("concat fusion needs at least one token")
    pooled = tokens.mean(axis=-2)
    return T.concat([g, pooled], axis=-1) @ proj


def mlp_regress(fused: Tensor, p: MLPHeadParams) -> Tensor:
    """[b, d_fused] -> [b] scores, unconstrained (no clamping here)."""
    hidden = T.silu(fused @ p.w1 + p.b1.reshape(1, -1))
    out = hidden @ p.w2 + p.b2.reshape(1, 1)
    return out.reshape(out.shape[0])


@dataclass
class ModelConfig:
    image_size: int = 224
    vim: VimConfig = field(default_factory=VimConfig)
    prior: PriorEncoderConfig = field(default_factory=PriorEncoderConfig)
    num_heads: int = 4
    d_hidden: int = 256
    fusion_mode: str = "cross_attention"

    def validate(self) -> None:
        self.vim.validate(self.image_size)
        self.prior.validate()
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.vim.d_model % self.num_heads:
            raise ConfigError(
                f"d_model {self.vim.d_model} not divisible by {self.num_heads} heads"
            )
        if self.d_hidden < 1:
            raise ConfigError("d_hidden must be positive")

    @property
    def d_fused(self) -> int:
        if self.fusion_mode in ("cross_attention", "concat"):
            return 2 * self.vim.d_model
        return self.vim.d_model

    @property
    def n_patch_tokens(self) -> int:
        return (self.image_size // self.vim.patch_size) ** 2


class Model:
    """Dual-stream regressor. One fusion mode per instance.

    All parameter groups are built (seeded, deterministic) no matter the
    mode so ablations share initialization; only the groups wired into the
    active mode count as trainable.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        dm = cfg.vim.d_model
        patch_dim = 3 * cfg.vim.patch_size ** 2

        self.encoder = FrozenEncoder(cfg.prior, dtype=dtype)

        rng = np.random.default_rng([seed, 1])
        self.patch_w = Tensor(
            (rng.normal(size=(patch_dim, dm)) / math.sqrt(patch_dim)).astype(dtype),
            requires_grad=True,
        )
        self.patch_b = Tensor(np.zeros(dm, dtype=dtype), requires_grad=True)
        self.pos = Tensor(
            (0.02 * rng.normal(size=(cfg.n_patch_tokens, dm))).astype(dtype),
            requires_grad=True,
        )

        self.blocks = [
            init_block_params(np.random.default_rng([seed, 2, i]), cfg.vim, dtype=dtype)
            for i in range(cfg.vim.depth)
        ]

        self.prior_proj = init_scale_projections(
            np.random.default_rng([seed, 3]), tuple(cfg.prior.stage_channels), dm, dtype=dtype
        )

        rng = np.random.default_rng([seed, 4])
        scale = 1.0 / math.sqrt(dm)
        self.attn = CrossAttentionParams(
            w_q=Tensor((rng.normal(size=(dm, dm)) * scale).astype(dtype), requires_grad=True),
            w_k=Tensor((rng.normal(size=(dm, dm)) * scale).astype(dtype), requires_grad=True),
            w_v=Tensor((rng.normal(size=(dm, dm)) * scale).astype(dtype), requires_grad=True),
            w_o=Tensor((rng.normal(size=(dm, dm)) * scale).astype(dtype), requires_grad=True),
            num_heads=cfg.num_heads,
        )

        rng = np.random.default_rng([seed, 5])
        self.concat_w = Tensor(
            (rng.normal(size=(2 * dm, 2 * dm)) / math.sqrt(2 * dm)).astype(dtype),
            requires_grad=True,
        )

        rng = np.random.default_rng([seed, 6])
        df, dh = cfg.d_fused, cfg.d_hidden
        self.head = MLPHeadParams(
            w1=Tensor((rng.normal(size=(df, dh)) / math.sqrt(df)).astype(dtype), requires_grad=True),
            b1=Tensor(np.zeros(dh, dtype=dtype), requires_grad=True),
            w2=Tensor((rng.normal(size=(dh, 1)) / math.sqrt(dh)).astype(dtype), requires_grad=True),
            b2=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        )

    # -- parameter bookkeeping ------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        """Every parameter tensor, mode-independent, stable names."""
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b, "patch.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"block{i}"))
        for k, (w, b) in enumerate(self.prior_proj):
            out[f"prior.proj{k}.w"] = w
            out[f"prior.proj{k}.b"] = b
        out.update(self.attn.named("attn"))
        out["concat.w"] = self.concat_w
        out.update(self.head.named("head"))
        return out

    def trainable(self) -> dict[str, Tensor]:
        """Parameters wired into this instance's fusion mode (what the
        optimizer sees). Frozen encoder weights are plain arrays and can
        never appear here."""
        mode = self.cfg.fusion_mode
        groups = {"head"}
        if mode in ("cross_attention", "concat", "mamba_only"):
            groups |= {"patch", "block"}
        if mode in ("cross_attention", "concat", "prior_only"):
            groups.add("prior")
        if mode == "cross_attention":
            groups.add("attn")
        if mode == "concat":
            groups.add("concat")
        out = {}
        for name, p in self.params().items():
            group = name.split(".")[0].rstrip("0123456789")
            if group in groups:
                out[name] = p
        return out

    def num_trainable(self) -> int:
        return sum(p.size for p in self.trainable().values())

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- forward --------------------------------------------------------------

    def _mamba_vector(self, patch_feats: np.ndarray) -> Tensor:
        n_tokens = patch_feats.shape[1]
        if n_tokens > self.pos.shape[0]:
            raise DimensionError(
                f"{n_tokens} tokens exceed positional table of {self.pos.shape[0]}"
            )
        dm = self.cfg.vim.d_model
        tok = Tensor(patch_feats.astype(self.dtype, copy=False)) @ self.patch_w
        tok = tok + self.patch_b.reshape(1, 1, dm)
        pos = T.narrow(self.pos, 0, 0, n_tokens) if n_tokens < self.pos.shape[0] else self.pos
        tok = tok + pos.reshape(1, n_tokens, dm)
        for blk in self.blocks:
            tok = mamba_block(tok, blk)
        return global_pool(tok, self.cfg.vim.pool)

    def _prior_tokens(self, pooled_scales: list[np.ndarray]) -> Tensor:
        dm = self.cfg.vim.d_model
        groups = []
        for grid, (w, b) in zip(pooled_scales, self.prior_proj):
            if grid.shape[-1] != w.shape[0]:
                raise DimensionError(
                    f"pooled scale width {grid.shape[-1]} != projection input {w.shape[0]}"
                )
            tok = Tensor(grid.astype(self.dtype, copy=False)) @ w + b.reshape(1, 1, dm)
            groups.append(tok)
        return T.concat(groups, axis=-2)

    def forward_features(
        self,
        patch_feats: np.ndarray | None,
        pooled_scales: list[np.ndarray] | None,
    ) -> Tensor:
        """Forward from pre-extracted constants: flattened patches
        [b, L, 3*p*p] and per-scale pooled grids [b, cells, C_i]. The image
        front end is not differentiable, so this is the entire trainable
        pipeline; it is also the seam the gradient checker drives."""
        mode = self.cfg.fusion_mode
        needs_mamba = mode in ("cross_attention", "concat", "mamba_only")
        needs_prior = mode in ("cross_attention", "concat", "prior_only")
        if needs_mamba and patch_feats is None:
            raise ConfigError(f"mode {mode} needs patch features")
        if needs_prior and pooled_scales is None:
            raise ConfigError(f"mode {mode} needs prior features")

        g = self._mamba_vector(patch_feats) if needs_mamba else None
        ptok = self._prior_tokens(pooled_scales) if needs_prior else None

        if mode == "cross_attention":
            fused = cross_attention_fuse(g, ptok, self.attn)
        elif mode == "concat":
            fused = concat_fuse(g, ptok, self.concat_w)
        elif mode == "prior_only":
            fused = ptok.mean(axis=-2)
        else:  # mamba_only
            fused = g
        return mlp_regress(fused, self.head)

    def forward(self, images, pyramid: FeaturePyramid | None = None) -> Tensor:
        """Predict scores for a [b, 3, s, s] batch. When ``pyramid`` is
        given (e.g. imported from FPYR files) it replaces the surrogate
        encoder output; its scales must be batched like the images."""
        imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
        if imgs.ndim != 4:
            raise DimensionError(f"forward needs [b, 3, s, s], got {imgs.shape}")
        mode = self.cfg.fusion_mode

        patch_feats = None
        if mode in ("cross_attention", "concat", "mamba_only"):
            patch_feats = patchify(imgs, self.cfg.vim.patch_size)

        pooled = None
        if mode in ("cross_attention", "concat", "prior_only"):
            pyr = pyramid if pyramid is not None else self.encoder.extract(imgs)
            pooled = [adaptive_avg_pool(s, TOKEN_GRID) for s in pyr.scales]
        return self.forward_features(patch_feats, pooled)

    def predict(self, images, pyramid: FeaturePyramid | None = None, clamp: bool = False) -> np.ndarray:
        """Inference: no graph recorded; optional clamp to the score range."""
        with no_grad():
            out = self.forward(images, pyramid=pyramid).data
        return np.clip(out, 1.0, 5.0) if clamp else out
