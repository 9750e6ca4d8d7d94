"""Reference toy backend.

A small 4-scale encoder-decoder denoiser with one self-attention site per
decoder block, seeded deterministic weights, and float64 math. It exists so
that every inversion / guidance / attention behavior is testable on a desk
machine: the network is smooth (SiLU everywhere), fully differentiable by
autograd, and its latent codec is exact by construction (image channels are
copied into the first latent channels, the spare channel is zero).
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional

import torch
import torch.nn.functional as F

from ..attention import attend
from ..errors import ContractError
from .base import (
    AttentionRecord,
    Backend,
    BackendProfile,
    Capture,
    DenoiseOutput,
    FeatureStack,
    Latent,
    register_backend,
)
from .schedules import LinearBetaSchedule, schedule_from_config

_EMB_DIM = 32
_COND_DIM = 8
# Decoder block output channels, coarsest (2x2 for a 16x16 latent) first.
_DEC_CHANNELS = (32, 24, 16, 16)
_ENC_CHANNELS = (16, 24, 32, 40)


def _silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


class ToyBackend(Backend):
    def __init__(
        self,
        latent_size: tuple[int, int] = (16, 16),
        latent_channels: int = 4,
        seed: int = 1234,
        schedule: Optional[LinearBetaSchedule] = None,
        heads: int = 2,
        head_dim: int = 8,
        feature_site: str = "block_out",
        output_scale: float = 0.02,
        name: str = "toy",
    ):
        h, w = latent_size
        if h % 8 or w % 8:
            raise ContractError("toy latent size must be divisible by 8 (three downsamples)")
        if latent_channels < 4:
            raise ContractError("toy backend needs >= 4 latent channels (3 image + spare)")
        if feature_site not in ("block_out", "pre_attn"):
            raise ContractError(f"unknown feature_site {feature_site!r}")
        self.schedule = schedule or LinearBetaSchedule(1e-4, 8e-3, 50)
        self.heads = heads
        self.head_dim = head_dim
        self.inner = heads * head_dim
        self.output_scale = float(output_scale)
        self.seed = int(seed)
        self.dtype = torch.float64

        feature_dims = tuple(
            (c, (h // 2 ** (3 - i), w // 2 ** (3 - i))) for i, c in enumerate(_DEC_CHANNELS)
        )
        self.profile = BackendProfile(
            name=name,
            latent_channels=latent_channels,
            latent_size=(h, w),
            downscale=1,
            feature_dims=feature_dims,
            attention_heads=heads,
            attention_head_dim=head_dim,
            timestep_count_max=self.schedule.t_max,
            feature_site=feature_site,
        )
        self._params = self._init_params(latent_channels)

    # -- weights ----------------------------------------------------------

    def _init_params(self, latent_channels: int) -> dict[str, torch.Tensor]:
        gen = torch.Generator().manual_seed(self.seed)

        def conv(out_c, in_c, k):
            fan_in = in_c * k * k
            return torch.randn(out_c, in_c, k, k, generator=gen, dtype=self.dtype) / math.sqrt(
                fan_in
            )

        def linear(out_c, in_c):
            return torch.randn(out_c, in_c, generator=gen, dtype=self.dtype) / math.sqrt(in_c)

        p: dict[str, torch.Tensor] = {}
        enc_in = (latent_channels, *_ENC_CHANNELS[:-1])
        for i, (cin, cout) in enumerate(zip(enc_in, _ENC_CHANNELS), start=1):
            p[f"enc{i}.w"] = conv(cout, cin, 3)
        # Decoder block l consumes the upsampled previous block plus the skip,
        # except block 1 which reads the bottleneck directly.
        dec_in = (
            _ENC_CHANNELS[3],
            _DEC_CHANNELS[0] + _ENC_CHANNELS[2],
            _DEC_CHANNELS[1] + _ENC_CHANNELS[1],
            _DEC_CHANNELS[2] + _ENC_CHANNELS[0],
        )
        for i, (cin, cout) in enumerate(zip(dec_in, _DEC_CHANNELS), start=1):
            p[f"dec{i}.w"] = conv(cout, cin, 3)
            p[f"dec{i}.emb"] = linear(cout, _EMB_DIM)
            p[f"attn{i}.norm_w"] = torch.ones(cout, dtype=self.dtype)
            p[f"attn{i}.norm_b"] = torch.zeros(cout, dtype=self.dtype)
            p[f"attn{i}.qkv"] = conv(3 * self.inner, cout, 1)
            p[f"attn{i}.proj"] = conv(cout, self.inner, 1)
        p["temb.w1"] = linear(_EMB_DIM, 16)
        p["temb.w2"] = linear(_EMB_DIM, _EMB_DIM)
        p["cond.w"] = linear(_EMB_DIM, _COND_DIM)
        p["head.w"] = conv(latent_channels, _DEC_CHANNELS[3], 3)
        return p

    # -- conditioning -------------------------------------------------------

    def condition(self, prompt: Optional[str]):
        """None means unconditional; a prompt maps to a fixed pseudo-embedding."""
        if prompt is None:
            return None
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        vals = [int.from_bytes(digest[2 * i : 2 * i + 2], "little") for i in range(_COND_DIM)]
        return torch.tensor([v / 65535.0 * 2.0 - 1.0 for v in vals], dtype=self.dtype)

    def _embedding(self, t: int, text_cond) -> torch.Tensor:
        half = 8
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=self.dtype) / (half - 1)
        )
        angles = freqs * float(t)
        sin_emb = torch.cat([torch.sin(angles), torch.cos(angles)])
        emb = self._params["temb.w2"] @ _silu(self._params["temb.w1"] @ sin_emb)
        if text_cond is not None:
            cond = torch.as_tensor(text_cond, dtype=self.dtype).reshape(-1)
            if cond.numel() != _COND_DIM:
                raise ContractError(f"toy text condition must have {_COND_DIM} entries")
            emb = emb + self._params["cond.w"] @ cond
        return emb

    # -- forward ------------------------------------------------------------

    def predict(
        self,
        latent: Latent,
        t: int,
        text_cond=None,
        attn_override: Optional[AttentionRecord] = None,
        capture: Capture = Capture.NONE,
    ) -> DenoiseOutput:
        self._check_predict_args(latent, t, attn_override)
        p = self._params
        x = latent.data.to(self.dtype)[None]  # [1, C, H, W]
        emb = self._embedding(t, text_cond)

        e1 = _silu(F.conv2d(x, p["enc1.w"], padding=1))
        e2 = _silu(F.conv2d(e1, p["enc2.w"], stride=2, padding=1))
        e3 = _silu(F.conv2d(e2, p["enc3.w"], stride=2, padding=1))
        e4 = _silu(F.conv2d(e3, p["enc4.w"], stride=2, padding=1))

        skips = {2: e3, 3: e2, 4: e1}
        h = e4
        features: list[torch.Tensor] = []
        kv_sites: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        for layer in range(1, 5):
            if layer > 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = torch.cat([h, skips[layer]], dim=1)
            h = F.conv2d(h, p[f"dec{layer}.w"], padding=1)
            h = h + (p[f"dec{layer}.emb"] @ emb)[None, :, None, None]
            h = _silu(h)
            pre_attn = h
            h, (k_t, v_t) = self._attn_site(layer, h, attn_override)
            features.append(
                (h if self.profile.feature_site == "block_out" else pre_attn)[0]
            )
            kv_sites[layer] = (k_t, v_t)

        noise = F.conv2d(h, p["head.w"], padding=1)[0] * self.output_scale
        return DenoiseOutput(
            noise_pred=noise,
            features=FeatureStack(tuple(features), t) if capture & Capture.FEATURES else None,
            attention=AttentionRecord(kv_sites) if capture & Capture.KV else None,
        )

    def _attn_site(
        self, layer: int, x: torch.Tensor, override: Optional[AttentionRecord]
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        p = self._params
        _, c, hh, ww = x.shape
        xn = F.group_norm(x, 1, p[f"attn{layer}.norm_w"], p[f"attn{layer}.norm_b"])
        qkv = F.conv2d(xn, p[f"attn{layer}.qkv"])[0]
        q, k, v = qkv.split(self.inner, dim=0)

        def tokens(m: torch.Tensor) -> torch.Tensor:
            return m.reshape(self.heads, self.head_dim, hh * ww).permute(0, 2, 1)

        q_t, k_t, v_t = tokens(q), tokens(k), tokens(v)
        use_k, use_v = (k_t, v_t)
        if override is not None and layer in override.sites:
            use_k, use_v = override.sites[layer]
        out = attend(q_t, use_k.to(self.dtype), use_v.to(self.dtype))
        out = out.permute(0, 2, 1).reshape(1, self.inner, hh, ww)
        out = F.conv2d(out, p[f"attn{layer}.proj"])
        return x + out, (k_t, v_t)

    # -- codec / schedule -----------------------------------------------------

    def encode(self, image: torch.Tensor) -> Latent:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(f"expected [3,H,W] image, got {tuple(image.shape)}")
        h, w = image.shape[1:]
        lh, lw = self.profile.latent_shape_for((h, w))
        if (lh, lw) != self.profile.latent_size:
            raise ContractError(
                f"image {h}x{w} maps to latent {lh}x{lw}, profile expects "
                f"{self.profile.latent_size}"
            )
        data = torch.zeros(
            (self.profile.latent_channels, lh, lw), dtype=self.dtype
        )
        data[:3] = image.to(self.dtype)
        return Latent(data)

    def decode(self, latent: Latent) -> torch.Tensor:
        return latent.data[:3].clone()

    def alpha_bar(self, t: int) -> float:
        return self.schedule.alpha_bar(t)


def _toy_factory(profile_cfg: dict, seed: Optional[int] = None) -> ToyBackend:
    return ToyBackend(
        latent_size=tuple(profile_cfg.get("latent_size", (16, 16))),
        latent_channels=profile_cfg.get("latent_channels", 4),
        seed=seed if seed is not None else profile_cfg.get("seed", 1234),
        schedule=(
            schedule_from_config(profile_cfg["schedule"])
            if "schedule" in profile_cfg
            else None
        ),
        heads=profile_cfg.get("heads", 2),
        head_dim=profile_cfg.get("head_dim", 8),
        feature_site=profile_cfg.get("feature_site", "block_out"),
        output_scale=profile_cfg.get("output_scale", 0.02),
        name=profile_cfg.get("name", "toy"),
    )


register_backend("toy", _toy_factory)
