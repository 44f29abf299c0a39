"""Feature extraction backends.

``hub``: the real pretrained latent-diffusion encoder pulled from a public
model hub (torch + diffusers required at call time). The image is encoded
to the latent space (posterior mean, no sampling, so timestep 0 is exactly
deterministic), the requested timestep only conditions the embedding, and
the four down-stage activations are taken before each stage's downsampler
so every scale keeps at least a 7x7 grid at 224-pixel input. Conditioning
uses a zero text context, recorded in the sidecar metadata.

``surrogate``: a weight-free stand-in with the same channel widths
(320, 640, 1280, 1280) and spatial ladder (28, 14, 7, 7): each scale is a
fixed seeded projection of the pooled image, tanh-squashed. Deterministic
in (model_id, timestep, pathway, image); used when real weights cannot be
fetched (tests, offline machines).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ExportError, InputError, RetrievalError
from .preprocess import IMAGE_SIZE

SD15_WIDTHS = (320, 640, 1280, 1280)
LATENT_DOWNSAMPLE = 8


def stage_spatial_sizes(image_size: int = IMAGE_SIZE) -> tuple[int, ...]:
    # latent grid, then halving with the last stage not downsampled
    latent = image_size // LATENT_DOWNSAMPLE
    return (latent, latent // 2, latent // 4, latent // 4)


class SurrogateWidthsBackend:
    """Deterministic content-dependent pyramid at the real channel widths."""

    name = "surrogate"

    def __init__(self, model_id: str, timestep: int, pathway: str):
        self.model_id = model_id
        self.timestep = timestep
        self.pathway = pathway
        digest = hashlib.sha256(
            f"{model_id}|{timestep}|{pathway}".encode("utf-8")
        ).digest()
        self._seed_root = int.from_bytes(digest[:8], "little")

    def widths(self) -> tuple[int, ...]:
        return SD15_WIDTHS

    def extract(self, img: np.ndarray) -> list[np.ndarray]:
        if img.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise InputError(f"expected [3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {img.shape}")
        scales = []
        for stage, (c_out, grid) in enumerate(zip(SD15_WIDTHS, stage_spatial_sizes())):
            pooled = _pool(img, grid)  # [3, grid, grid]
            rng = np.random.default_rng([self._seed_root, stage])
            mix = (rng.normal(size=(c_out, 3)) / math.sqrt(3.0)).astype(np.float32)
            feat = np.tanh(np.einsum("oc,chw->ohw", mix, pooled, optimize=True))
            scales.append(feat.astype(np.float32))
        return scales


def _pool(img: np.ndarray, grid: int) -> np.ndarray:
    c, h, w = img.shape
    if h % grid or w % grid:
        raise InputError(f"image size {h} not divisible by grid {grid}")
    bh, bw = h // grid, w // grid
    return img.reshape(c, grid, bh, grid, bw).mean(axis=(2, 4))


class DiffusionHubBackend:
    """Real pretrained encoder. Imports torch/diffusers lazily so the rest
    of the exporter works without them."""

    name = "hub"

    def __init__(self, model_id: str, timestep: int, pathway: str):
        if pathway != "latent":
            raise InputError(
                f"pathway {pathway!r} unsupported by the hub backend: the v1.5 "
                "encoder operates on VAE latents"
            )
        self.model_id = model_id
        self.timestep = timestep
        self.pathway = pathway
        try:
            import torch  # noqa: F401
            from diffusers import AutoencoderKL, UNet2DConditionModel  # noqa: F401
        except ImportError as e:
            raise RetrievalError(
                f"hub backend needs torch and diffusers ({e}); install the [hub] "
                "extra or use --backend surrogate"
            ) from None
        import torch
        from diffusers import AutoencoderKL, UNet2DConditionModel

        try:
            self._vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae")
            self._unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet")
        except Exception as e:
            raise RetrievalError(f"cannot fetch {model_id}: {e}") from None
        self._vae.eval()
        self._unet.eval()
        self._torch = torch
        if self.timestep < 0 or self.timestep >= 1000:
            raise InputError(f"timestep {timestep} outside the model's [0, 1000) range")

    def widths(self) -> tuple[int, ...]:
        return tuple(self._unet.config.block_out_channels)

    def extract(self, img: np.ndarray) -> list[np.ndarray]:
        torch = self._torch
        with torch.no_grad():
            pixels = torch.from_numpy(img[None]).float()
            posterior = self._vae.encode(pixels).latent_dist
            latent = posterior.mean * self._vae.config.scaling_factor  # no sampling
            t = torch.tensor([self.timestep], dtype=torch.long)
            t_emb = self._unet.time_proj(t).to(latent.dtype)
            emb = self._unet.time_embedding(t_emb)
            context = torch.zeros(
                (1, 77, self._unet.config.cross_attention_dim), dtype=latent.dtype
            )

            sample = self._unet.conv_in(latent)
            scales = []
            for block in self._unet.down_blocks:
                if hasattr(block, "attentions") and block.attentions is not None:
                    sample, states = block(sample, emb, encoder_hidden_states=context)
                else:
                    sample, states = block(sample, emb)
                # last pre-downsample activation; blocks without a
                # downsampler end on it directly
                pre = states[-2] if getattr(block, "downsamplers", None) else states[-1]
                scales.append(pre[0].cpu().numpy().astype(np.float32))
        if len(scales) != 4:
            raise ExportError(f"expected 4 down stages, got {len(scales)}")
        return scales


BACKENDS = {
    "surrogate": SurrogateWidthsBackend,
    "hub": DiffusionHubBackend,
}


def make_backend(name: str, model_id: str, timestep: int, pathway: str):
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise InputError(f"unknown backend {name!r}; pick from {sorted(BACKENDS)}") from None
    return cls(model_id, timestep, pathway)
