"""Guided deterministic sampling.

Each step: assemble the attention substitution plan from the bank, form the
classifier-free-guided noise estimate, optionally add the energy gradient
(first n_gated steps only), then take one deterministic update toward t-1.
Everything is pure given (bank, spec, config, condition), so reruns are
bitwise identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .attention import KVPlan, build_kv_plan
from .backend.base import Backend, Latent
from .config import GuidanceConfig
from .errors import ContractError
from .guidance import EnergyReport, guidance_gradient, materialize_layers
from .inversion import MemoryBank
from .tasks import EditSpec


@dataclass
class StepRecord:
    t: int
    seconds: float
    gradient_norm: Optional[float] = None
    energy: Optional[dict] = None
    preview: bool = False

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "seconds": self.seconds,
            "gradient_norm": self.gradient_norm,
            "energy": self.energy,
            "preview": self.preview,
        }


@dataclass
class SampleRunState:
    records: list[StepRecord] = field(default_factory=list)
    previews: list[tuple[int, torch.Tensor]] = field(default_factory=list)
    gradient_calls: int = 0
    cancelled: bool = False

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r.as_dict()) for r in self.records)


def cfg_noise(
    backend: Backend,
    z: Latent,
    t: int,
    text_cond,
    kv_plan: Optional[KVPlan],
    scale: float,
) -> torch.Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond), both passes under the
    same substitution plan."""
    if scale < 1:
        raise ContractError("classifier-free guidance scale must be >= 1")
    override = kv_plan.record if kv_plan is not None else None
    cond = backend.predict(z, t, text_cond=text_cond, attn_override=override)
    if scale == 1 or text_cond is None:
        return cond.noise_pred
    uncond = backend.predict(z, t, text_cond=None, attn_override=override)
    return uncond.noise_pred + scale * (cond.noise_pred - uncond.noise_pred)


def predicted_x0(z: torch.Tensor, eps: torch.Tensor, t: int, alpha_bar) -> torch.Tensor:
    a_t = alpha_bar(t)
    return (z - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)


def ddim_step(z: torch.Tensor, eps: torch.Tensor, t: int, alpha_bar) -> torch.Tensor:
    """Deterministic update z_t -> z_{t-1}; exact inverse of the inversion
    recursion when fed the same noise estimate."""
    if t < 1:
        raise ContractError("ddim_step needs t >= 1")
    a_prev = alpha_bar(t - 1)
    x0 = predicted_x0(z, eps, t, alpha_bar)
    return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps


GradientFn = Callable[[Latent, int, object], tuple[torch.Tensor, Optional[EnergyReport]]]


def run(
    backend: Backend,
    bank: MemoryBank,
    spec: Optional[EditSpec],
    config: GuidanceConfig,
    text_cond=None,
    *,
    gradient_fn: Optional[GradientFn] = None,
    kv_substitution: bool = True,
    eta_schedule: Optional[Callable[[int, int], float]] = None,
    step_callback: Optional[Callable[[StepRecord, Optional[torch.Tensor]], None]] = None,
    cancel_check: Optional[Callable[[], bool]] = None,
) -> tuple[Latent, SampleRunState]:
    """Full sampling pass from the bank's inversion prior down to z_0.

    spec None means reconstruction (no guidance terms). A custom gradient_fn
    replaces the energy gradient; eta_schedule(step_index, t) rescales the
    constant step size per gated step.
    """
    t_max = bank.t_max
    if config.steps != t_max:
        raise ContractError(f"config.steps={config.steps} but the bank holds T={t_max}")
    if bank.profile_hash != backend.profile.content_hash():
        raise ContractError("bank was built under a different backend profile")
    kind = spec.kind if spec is not None else "reconstruct"
    if gradient_fn is None and spec is not None and config.n_gated > 0:
        geometry = materialize_layers(spec, backend.profile, config.layers)

        def gradient_fn(zl: Latent, t: int, entry):
            return guidance_gradient(
                zl, entry, spec, config, backend, text_cond, geometry=geometry
            )

    state = SampleRunState()
    z = bank.z_T_gen.data.clone()
    for t in range(t_max, 0, -1):
        if cancel_check is not None and cancel_check():
            state.cancelled = True
            break
        started = time.perf_counter()
        entry = bank.lookup(t)
        plan = build_kv_plan(entry, kind) if kv_substitution else None
        eps = cfg_noise(backend, Latent(z), t, text_cond, plan, config.cfg_scale)

        grad_norm = None
        energy = None
        if gradient_fn is not None and (t_max - t) < config.n_gated:
            grad, report = gradient_fn(Latent(z), t, entry)
            eta_t = config.eta * (eta_schedule(t_max - t, t) if eta_schedule else 1.0)
            eps = eps + eta_t * grad
            grad_norm = float(grad.norm())
            energy = report.as_dict() if report is not None else None
            state.gradient_calls += 1

        steps_done = t_max - t + 1
        preview = steps_done % config.preview_every == 0 or t == 1
        preview_image = None
        if preview:
            x0 = predicted_x0(z, eps, t, backend.alpha_bar)
            preview_image = backend.decode(Latent(x0))
            state.previews.append((t, preview_image))

        z = ddim_step(z, eps, t, backend.alpha_bar)
        record = StepRecord(
            t=t,
            seconds=time.perf_counter() - started,
            gradient_norm=grad_norm,
            energy=energy,
            preview=preview,
        )
        state.records.append(record)
        if step_callback is not None:
            step_callback(record, preview_image)
    return Latent(z), state
