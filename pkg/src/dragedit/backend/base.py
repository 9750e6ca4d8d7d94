"""Denoiser backend abstraction.

A backend wraps a noise-prediction network plus its latent codec and noise
schedule. Editing code only ever talks to this interface, so the reference
toy network and a user-supplied pretrained model are interchangeable.

Per-call capture/override state travels in arguments; a constructed backend
is immutable and safe to share between concurrent jobs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Flag, auto
from typing import Callable, Optional

import torch

from ..errors import ContractError

# Decoder layers are indexed 1..4, coarsest first, matching the usual
# "first layer / fourth layer" language for UNet decoders.
DECODER_LAYER_COUNT = 4


class Capture(Flag):
    """What a predict() call should record besides the noise estimate."""

    NONE = 0
    FEATURES = auto()
    KV = auto()
    ALL = FEATURES | KV


@dataclass(frozen=True)
class Latent:
    """A multi-channel spatial tensor plus a tag for which space it lives in."""

    data: torch.Tensor  # [C, H, W]
    space_tag: str = "latent"  # "latent" | "image"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"latent must be [C,H,W], got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ContractError("latent contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        c, h, w = self.data.shape
        return (c, h, w)

    def clone(self) -> "Latent":
        return Latent(self.data.clone(), self.space_tag)


@dataclass(frozen=True)
class BackendProfile:
    """Static description of a backend's tensor geometry and schedule."""

    name: str
    latent_channels: int
    latent_size: tuple[int, int]
    downscale: int  # image pixels per latent cell along each axis
    feature_dims: tuple[tuple[int, tuple[int, int]], ...]  # per layer: (channels, (H, W))
    attention_heads: int
    attention_head_dim: int
    timestep_count_max: int
    feature_site: str = "block_out"  # where in a decoder block features are read
    decoder_layer_count: int = DECODER_LAYER_COUNT

    def __post_init__(self):
        if self.decoder_layer_count != DECODER_LAYER_COUNT:
            raise ContractError("profile must expose exactly four decoder layers")
        if len(self.feature_dims) != DECODER_LAYER_COUNT:
            raise ContractError("feature_dims must have one entry per decoder layer")
        sizes = [h * w for _, (h, w) in self.feature_dims]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ContractError("feature spatial sizes must strictly increase layer 1 -> 4")

    def latent_shape_for(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        """Latent (H, W) for an image, enforcing divisibility by the downscale."""
        h, w = image_hw
        if h % self.downscale or w % self.downscale:
            raise ContractError(
                f"image {h}x{w} not divisible by backend downscale {self.downscale}"
            )
        return (h // self.downscale, w // self.downscale)

    def tokens_per_site(self) -> dict[int, int]:
        """Self-attention token count at each decoder layer."""
        return {i + 1: h * w for i, (_, (h, w)) in enumerate(self.feature_dims)}

    def scale_for_layer(self, layer: int, image_hw: tuple[int, int]) -> int:
        """Image pixels per feature cell at a decoder layer (1-based)."""
        _, (fh, fw) = self.feature_dims[layer - 1]
        h, w = image_hw
        if h % fh or w % fw:
            raise ContractError(f"image {h}x{w} incompatible with layer-{layer} grid {fh}x{fw}")
        sy, sx = h // fh, w // fw
        if sy != sx:
            raise ContractError("anisotropic feature scales are not supported")
        return sy

    def content_hash(self) -> str:
        payload = {
            "name": self.name,
            "latent_channels": self.latent_channels,
            "latent_size": list(self.latent_size),
            "downscale": self.downscale,
            "feature_dims": [[c, list(hw)] for c, hw in self.feature_dims],
            "attention_heads": self.attention_heads,
            "attention_head_dim": self.attention_head_dim,
            "timestep_count_max": self.timestep_count_max,
            "feature_site": self.feature_site,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureStack:
    """Per-decoder-layer intermediate feature maps from one denoiser call."""

    layers: tuple[torch.Tensor, ...]  # layer l: [C_l, H_l, W_l], index 0 == layer 1
    timestep: int

    def __post_init__(self):
        if len(self.layers) != DECODER_LAYER_COUNT:
            raise ContractError("feature stack must hold one tensor per decoder layer")

    def layer(self, index: int) -> torch.Tensor:
        """1-based layer access."""
        if not 1 <= index <= DECODER_LAYER_COUNT:
            raise ContractError(f"decoder layer index {index} out of range 1..4")
        return self.layers[index - 1]


@dataclass(frozen=True)
class AttentionRecord:
    """Keys/values of every decoder self-attention site, pre-split per head.

    Tensors are shaped [heads, tokens, head_dim]; sites are keyed by their
    1-based decoder layer.
    """

    sites: dict[int, tuple[torch.Tensor, torch.Tensor]]

    def __post_init__(self):
        for layer, (k, v) in self.sites.items():
            if k.shape != v.shape:
                raise ContractError(f"site {layer}: K/V shapes differ: {k.shape} vs {v.shape}")
            if k.ndim != 3:
                raise ContractError(f"site {layer}: K must be [heads, tokens, dim]")

    def token_count(self, layer: int) -> int:
        return self.sites[layer][0].shape[1]

    def detached(self) -> "AttentionRecord":
        return AttentionRecord(
            {l: (k.detach(), v.detach()) for l, (k, v) in self.sites.items()}
        )


@dataclass(frozen=True)
class DenoiseOutput:
    noise_pred: torch.Tensor  # same shape as the input latent
    features: Optional[FeatureStack] = None
    attention: Optional[AttentionRecord] = None


class Backend:
    """Interface every denoiser backend implements.

    Concrete backends must be deterministic: identical (latent, t, cond,
    override) inputs produce bitwise-identical outputs.
    """

    profile: BackendProfile

    def predict(
        self,
        latent: Latent,
        t: int,
        text_cond=None,
        attn_override: Optional[AttentionRecord] = None,
        capture: Capture = Capture.NONE,
    ) -> DenoiseOutput:
        raise NotImplementedError

    def encode(self, image: torch.Tensor) -> Latent:
        raise NotImplementedError

    def decode(self, latent: Latent) -> torch.Tensor:
        raise NotImplementedError

    def alpha_bar(self, t: int) -> float:
        raise NotImplementedError

    def condition(self, prompt: Optional[str]):
        """Map a prompt to the opaque condition object predict() accepts."""
        raise NotImplementedError

    # -- shared argument validation -------------------------------------

    def _check_predict_args(
        self, latent: Latent, t: int, attn_override: Optional[AttentionRecord]
    ) -> None:
        p = self.profile
        expect = (p.latent_channels, *p.latent_size)
        if latent.shape != expect:
            raise ContractError(f"latent shape {latent.shape} != profile {expect}")
        if not 0 <= t <= p.timestep_count_max:
            raise ContractError(f"timestep {t} outside schedule 0..{p.timestep_count_max}")
        if attn_override is not None:
            base = p.tokens_per_site()
            for layer, (k, _) in attn_override.sites.items():
                if layer not in base:
                    raise ContractError(f"override names unknown attention site {layer}")
                heads, tokens, dim = k.shape
                if heads != p.attention_heads or dim != p.attention_head_dim:
                    raise ContractError(
                        f"site {layer}: override head geometry {heads}x{dim} != "
                        f"profile {p.attention_heads}x{p.attention_head_dim}"
                    )
                if tokens not in (base[layer], 2 * base[layer]):
                    raise ContractError(
                        f"site {layer}: override token count {tokens} must be 1x or 2x "
                        f"the profile count {base[layer]}"
                    )


# -- backend registry ----------------------------------------------------

_REGISTRY: dict[str, Callable[..., Backend]] = {}


def register_backend(kind: str, factory: Callable[..., Backend]) -> None:
    _REGISTRY[kind] = factory


def backend_factory(kind: str) -> Callable[..., Backend]:
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise ContractError(f"unknown backend kind {kind!r}; registered: {sorted(_REGISTRY)}")
