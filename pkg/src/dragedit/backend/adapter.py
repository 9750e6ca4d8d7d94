"""Adapter slot for a pretrained latent diffusion backend.

Weight loading is deliberately out of scope here: the adapter defines the
shape contract (spatial downscale 8, 4-channel latents) and delegates the
heavy calls to user-supplied functions. Anything that satisfies these
callables - for example hooks installed on a real UNet/VAE pair - plugs into
the rest of the engine unchanged.

Expected callables:
    denoise(latent_tensor, t, text_cond, attn_override, capture) -> DenoiseOutput
    encode_image(image_tensor [3,H,W]) -> latent tensor [4,H/8,W/8]
    decode_latent(latent_tensor) -> image tensor [3,H,W]
    condition(prompt | None) -> opaque condition object
"""

from __future__ import annotations

from typing import Callable, Optional

import torch

from ..errors import ContractError
from .base import (
    AttentionRecord,
    Backend,
    BackendProfile,
    Capture,
    DenoiseOutput,
    Latent,
    register_backend,
)
from .schedules import LinearBetaSchedule, schedule_from_config

PRETRAINED_DOWNSCALE = 8
PRETRAINED_LATENT_CHANNELS = 4


def pretrained_profile(
    name: str,
    latent_size: tuple[int, int],
    feature_dims,
    heads: int,
    head_dim: int,
    t_max: int,
    feature_site: str = "block_out",
) -> BackendProfile:
    return BackendProfile(
        name=name,
        latent_channels=PRETRAINED_LATENT_CHANNELS,
        latent_size=tuple(latent_size),
        downscale=PRETRAINED_DOWNSCALE,
        feature_dims=tuple((c, tuple(hw)) for c, hw in feature_dims),
        attention_heads=heads,
        attention_head_dim=head_dim,
        timestep_count_max=t_max,
        feature_site=feature_site,
    )


class ExternalLatentBackend(Backend):
    """Backend facade over user-supplied denoiser/codec callables."""

    def __init__(
        self,
        profile: BackendProfile,
        schedule: LinearBetaSchedule,
        denoise: Callable[..., DenoiseOutput],
        encode_image: Callable[[torch.Tensor], torch.Tensor],
        decode_latent: Callable[[torch.Tensor], torch.Tensor],
        condition: Optional[Callable[[Optional[str]], object]] = None,
    ):
        if profile.downscale != PRETRAINED_DOWNSCALE:
            raise ContractError("pretrained adapter profiles use spatial downscale 8")
        if profile.latent_channels != PRETRAINED_LATENT_CHANNELS:
            raise ContractError("pretrained adapter profiles use 4-channel latents")
        self.profile = profile
        self.schedule = schedule
        self._denoise = denoise
        self._encode = encode_image
        self._decode = decode_latent
        self._condition = condition or (lambda prompt: prompt)

    def predict(
        self,
        latent: Latent,
        t: int,
        text_cond=None,
        attn_override: Optional[AttentionRecord] = None,
        capture: Capture = Capture.NONE,
    ) -> DenoiseOutput:
        self._check_predict_args(latent, t, attn_override)
        out = self._denoise(latent.data, t, text_cond, attn_override, capture)
        if out.noise_pred.shape != latent.data.shape:
            raise ContractError(
                f"adapter noise_pred shape {tuple(out.noise_pred.shape)} != latent "
                f"{latent.shape}"
            )
        return out

    def encode(self, image: torch.Tensor) -> Latent:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(f"expected [3,H,W] image, got {tuple(image.shape)}")
        lh, lw = self.profile.latent_shape_for(tuple(image.shape[1:]))
        z = self._encode(image)
        expect = (PRETRAINED_LATENT_CHANNELS, lh, lw)
        if tuple(z.shape) != expect:
            raise ContractError(f"adapter encode returned {tuple(z.shape)}, expected {expect}")
        return Latent(z)

    def decode(self, latent: Latent) -> torch.Tensor:
        return self._decode(latent.data)

    def alpha_bar(self, t: int) -> float:
        return self.schedule.alpha_bar(t)

    def condition(self, prompt: Optional[str]):
        return self._condition(prompt)


def _external_factory(profile_cfg: dict, seed: Optional[int] = None) -> Backend:
    """Resolve `module:attribute` named in the profile to a constructed backend.

    The attribute must be a zero-argument factory (or one accepting the profile
    config dict) returning a Backend; this keeps model loading entirely in
    user code.
    """
    target = profile_cfg.get("factory")
    if not target:
        raise ContractError(
            "external backend profiles need a 'factory' entry of the form module:attr"
        )
    mod_name, _, attr = target.partition(":")
    if not attr:
        raise ContractError(f"bad factory spec {target!r}; expected module:attr")
    import importlib

    factory = getattr(importlib.import_module(mod_name), attr)
    try:
        return factory(profile_cfg)
    except TypeError:
        return factory()


register_backend("external", _external_factory)

__all__ = [
    "ExternalLatentBackend",
    "pretrained_profile",
    "schedule_from_config",
    "PRETRAINED_DOWNSCALE",
    "PRETRAINED_LATENT_CHANNELS",
]
