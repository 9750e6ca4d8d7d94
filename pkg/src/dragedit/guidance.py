"""Feature-correspondence energies and their gradient w.r.t. the latent.

The edit intent is expressed as similarities between UNet decoder features
of the latent being sampled and features replayed from the memory bank.
Similarities map to energies via 1/(alpha + beta*S), weighted terms sum over
the configured decoder layers, and the gradient of the total w.r.t. the
current latent is what the sampler injects into the noise estimate.

The guided / reference feature branches always enter as constants
(stop-gradient): only the generated branch is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import masks as M
from .backend.base import Backend, Capture, FeatureStack, Latent
from .config import GuidanceConfig
from .errors import ContractError, GuidanceError
from .masks import Mask
from .tasks import EditSpec, LayerGeometry, LocalPairs, materialize_layers

_COS_EPS = 1e-12


def _gather(features: torch.Tensor, cells: np.ndarray) -> torch.Tensor:
    """Channel vectors at selected grid cells: [C,H,W] x [n,2] -> [n,C]."""
    c, h, w = features.shape
    ys = torch.as_tensor(cells[:, 0], dtype=torch.long)
    xs = torch.as_tensor(cells[:, 1], dtype=torch.long)
    if len(cells) and (
        int(ys.min()) < 0 or int(ys.max()) >= h or int(xs.min()) < 0 or int(xs.max()) >= w
    ):
        raise ContractError(f"cell indices fall outside the {h}x{w} feature grid")
    return features[:, ys, xs].transpose(0, 1)


def _zoom(features: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(
        features[None], size=size, mode="bilinear", align_corners=False
    )[0]


def identity_pairs(mask: Mask) -> LocalPairs:
    cells = M.cells(mask)
    return LocalPairs(cells, cells)


def s_local(f_gen: torch.Tensor, f_gud: torch.Tensor, pairs: LocalPairs) -> torch.Tensor:
    """Mean of 0.5*cos+0.5 over paired positions; guided side is a constant."""
    if pairs is None or pairs.count == 0:
        raise ContractError("local similarity undefined on empty support")
    gud = f_gud
    if pairs.gud_zoom_size is not None:
        gud = _zoom(f_gud, pairs.gud_zoom_size)
    a = _gather(f_gen, pairs.gen_cells)
    b = _gather(gud, pairs.gud_cells).detach()
    cos = F.cosine_similarity(a, b, dim=1, eps=_COS_EPS)
    return (0.5 * cos + 0.5).mean()


def s_global(
    f_gen: torch.Tensor, m_gen: Mask, f_gud: torch.Tensor, m_gud: Mask
) -> torch.Tensor:
    """0.5*cos+0.5 between region-mean features; order inside regions is
    irrelevant by construction."""
    if m_gen is None or m_gud is None or m_gen.is_empty() or m_gud.is_empty():
        raise ContractError("global similarity undefined on empty regions")
    a = _gather(f_gen, M.cells(m_gen)).mean(dim=0)
    b = _gather(f_gud, M.cells(m_gud)).mean(dim=0).detach()
    cos = F.cosine_similarity(a, b, dim=0, eps=_COS_EPS)
    return 0.5 * cos + 0.5


def energy_edit(s, alpha: float = 1.0, beta: float = 4.0):
    """1/(alpha + beta*S): strictly decreasing in S on [0,1]."""
    s_val = float(s.detach()) if torch.is_tensor(s) else float(s)
    # non-finite values flow through so the gradient path can report which
    # term produced them
    if np.isfinite(s_val) and not -1e-9 <= s_val <= 1 + 1e-9:
        raise ContractError(f"similarity {s_val} outside [0,1]")
    if alpha <= 0 or beta <= 0:
        raise ContractError("alpha and beta must be > 0")
    return 1.0 / (alpha + beta * s)


def energy_content(
    f_gen: torch.Tensor,
    f_gud: torch.Tensor,
    m_share: Mask,
    alpha: float = 1.0,
    beta: float = 4.0,
):
    """Unedited-region consistency: identity-paired local similarity."""
    return energy_edit(s_local(f_gen, f_gud, identity_pairs(m_share)), alpha, beta)


def energy_opt_moving(
    f_gen: torch.Tensor,
    f_gud: torch.Tensor,
    m_ipt: Optional[Mask],
    m_ref: Mask,
    config: GuidanceConfig,
):
    """Inpainting pressure for the region a move uncovers: pull its appearance
    toward the reference region, push it away from the original object."""
    if m_ipt is None or m_ipt.is_empty():
        return torch.zeros((), dtype=f_gen.dtype)
    toward_ref = config.w_inpaint / (
        config.alpha + config.beta * s_global(f_gen, m_ipt, f_gud, m_ref)
    )
    away_from_self = s_local(f_gen, f_gud, identity_pairs(m_ipt))
    return toward_ref + away_from_self


def total_energy(terms: dict, config: GuidanceConfig):
    """w_e*E_edit + w_c*E_content + w_o*E_opt, summed over layers (fixed order)."""
    weights = (("edit", config.w_edit), ("content", config.w_content), ("opt", config.w_opt))
    total = None
    for layer in sorted(terms):
        for name, w in weights:
            value = terms[layer].get(name)
            if value is None or w == 0:
                continue
            contribution = w * value
            total = contribution if total is None else total + contribution
    return total


@dataclass
class EnergyReport:
    """Per-layer term values (floats) plus which terms were skipped and why."""

    total: float = 0.0
    layers: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"total": self.total, "layers": self.layers, "skipped": list(self.skipped)}


def _nonempty(m: Optional[Mask]) -> bool:
    return m is not None and not m.is_empty()


def _layer_terms(
    f_gen: torch.Tensor,
    f_gud: torch.Tensor,
    f_ref: Optional[torch.Tensor],
    spec: EditSpec,
    config: GuidanceConfig,
    geom: LayerGeometry,
    skipped: list,
) -> dict:
    """Evaluate this layer's energy terms; zero-weight terms are never computed."""
    terms: dict = {"edit": None, "content": None, "opt": None}
    mode = config.similarity_mode or spec.similarity_mode
    f_edit_src = f_ref if spec.uses_reference_image else f_gud
    if f_edit_src is None:
        raise ContractError(f"task {spec.kind!r} needs reference features")

    if config.w_edit != 0:
        if mode == "local":
            if geom.edit_pairs is not None:
                s = s_local(f_gen, f_edit_src, geom.edit_pairs)
                terms["edit"] = energy_edit(s, config.alpha, config.beta)
            else:
                skipped.append(f"layer{geom.layer}.edit: no pairs at this resolution")
        else:
            if _nonempty(geom.m_gen) and _nonempty(geom.m_gud):
                s = s_global(f_gen, geom.m_gen, f_edit_src, geom.m_gud)
                terms["edit"] = energy_edit(s, config.alpha, config.beta)
            else:
                skipped.append(f"layer{geom.layer}.edit: region empty at this resolution")

    if config.w_content != 0:
        if _nonempty(geom.m_share):
            terms["content"] = energy_content(
                f_gen, f_gud, geom.m_share, config.alpha, config.beta
            )
        else:
            skipped.append(f"layer{geom.layer}.content: m_share empty at this resolution")

    if config.w_opt != 0 and spec.kind in ("moving", "resizing"):
        if not _nonempty(geom.m_ipt):
            pass  # nothing was uncovered; the term is defined as absent
        elif _nonempty(geom.m_ref):
            terms["opt"] = energy_opt_moving(f_gen, f_gud, geom.m_ipt, geom.m_ref, config)
        else:
            skipped.append(f"layer{geom.layer}.opt: m_ref empty at this resolution")
    return terms


def guided_features(
    backend: Backend, entry, text_cond=None
) -> tuple[FeatureStack, Optional[FeatureStack]]:
    """Replay the bank latents through the denoiser to get the constant
    guided / reference feature stacks for entry.t."""
    with torch.no_grad():
        gud = backend.predict(
            entry.z_gud, entry.t, text_cond=text_cond, capture=Capture.FEATURES
        ).features
        ref = None
        if entry.z_ref is not None:
            ref = backend.predict(
                entry.z_ref, entry.t, text_cond=text_cond, capture=Capture.FEATURES
            ).features
    return gud, ref


def energy_for_latent(
    z_data: torch.Tensor,
    t: int,
    spec: EditSpec,
    config: GuidanceConfig,
    backend: Backend,
    guided: tuple[FeatureStack, Optional[FeatureStack]],
    geometry: dict[int, LayerGeometry],
    text_cond=None,
) -> tuple[Optional[torch.Tensor], EnergyReport]:
    """Total energy at one latent (None when every term was skipped)."""
    gen = backend.predict(
        Latent(z_data), t, text_cond=text_cond, capture=Capture.FEATURES
    ).features
    f_gud_stack, f_ref_stack = guided
    report = EnergyReport()
    terms: dict[int, dict] = {}
    for layer in config.layers:
        terms[layer] = _layer_terms(
            gen.layer(layer),
            f_gud_stack.layer(layer),
            f_ref_stack.layer(layer) if f_ref_stack is not None else None,
            spec,
            config,
            geometry[layer],
            report.skipped,
        )
        report.layers[layer] = {
            name: (float(val.detach()) if val is not None else None)
            for name, val in terms[layer].items()
        }
    total = total_energy(terms, config)
    report.total = float(total.detach()) if total is not None else 0.0
    return total, report


def guidance_gradient(
    z_t: Latent,
    bank_entry,
    spec: EditSpec,
    config: GuidanceConfig,
    backend: Backend,
    text_cond=None,
    geometry: Optional[dict[int, LayerGeometry]] = None,
    guided: Optional[tuple[FeatureStack, Optional[FeatureStack]]] = None,
) -> tuple[torch.Tensor, EnergyReport]:
    """d(total energy)/d(latent) at z_t; the guided branch is constant.

    Raises GuidanceError with per-term diagnostics if anything non-finite
    appears.
    """
    if geometry is None:
        geometry = materialize_layers(spec, backend.profile, config.layers)
    if guided is None:
        guided = guided_features(backend, bank_entry, text_cond)
    z = z_t.data.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        total, report = energy_for_latent(
            z, bank_entry.t, spec, config, backend, guided, geometry, text_cond
        )
        if total is None:
            return torch.zeros_like(z_t.data), report
        if not torch.isfinite(total):
            raise GuidanceError(
                f"non-finite energy at t={bank_entry.t}", term_values=report.as_dict()
            )
        (grad,) = torch.autograd.grad(total, z)
    if not torch.isfinite(grad).all():
        raise GuidanceError(
            f"non-finite gradient at t={bank_entry.t}", term_values=report.as_dict()
        )
    return grad.detach(), report
