"""Visual cross-attention control.

During sampling, every decoder self-attention site can have its keys and
values replaced by the ones recorded in the memory bank (optionally with the
reference image's K/V concatenated along the token axis). Queries always come
from the current pass, so output shape never depends on the substituted token
count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backend.base import AttentionRecord
from .errors import ContractError

MODE_GUD_ONLY = "gud_only"
MODE_GUD_CONCAT_REF = "gud_concat_ref"

# Tasks whose edit stays within one image use only the original image's K/V;
# cross-image tasks widen every site with the reference image's K/V.
# "reconstruct" is the no-edit replay path (bank round trips, previews).
_SINGLE_IMAGE_TASKS = frozenset({"moving", "resizing", "dragging", "reconstruct"})
_CROSS_IMAGE_TASKS = frozenset({"pasting", "replacing"})


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the token axis.

    q: [heads, tokens_q, d]; k, v: [heads, tokens_kv, d]. tokens_kv is free,
    so substituted or concatenated K/V keep the output shape [heads, tokens_q, d].
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ContractError("attend expects [heads, tokens, dim] tensors")
    if q.shape[-1] != k.shape[-1]:
        raise ContractError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[:2] != v.shape[:2]:
        raise ContractError("K and V must agree on heads and token count")
    d = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


@dataclass(frozen=True)
class KVPlan:
    """Per-site K/V tensors to substitute for one sampling step."""

    mode: str
    record: AttentionRecord

    def site(self, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.record.sites[layer]


def build_kv_plan(entry, task_kind: str) -> KVPlan:
    """Assemble the substitution K/V for a bank entry under a task's rules.

    Single-image tasks read only the original image's record even when the
    bank happens to carry a reference; cross-image tasks require the
    reference and concatenate it token-wise.
    """
    if task_kind in _SINGLE_IMAGE_TASKS:
        return KVPlan(MODE_GUD_ONLY, entry.kv_gud)
    if task_kind in _CROSS_IMAGE_TASKS:
        if entry.kv_ref is None:
            raise ContractError(f"task {task_kind!r} requires a reference image in the bank")
        sites = {}
        for layer, (k_g, v_g) in entry.kv_gud.sites.items():
            k_r, v_r = entry.kv_ref.sites[layer]
            sites[layer] = (torch.cat([k_g, k_r], dim=1), torch.cat([v_g, v_r], dim=1))
        return KVPlan(MODE_GUD_CONCAT_REF, AttentionRecord(sites))
    raise ContractError(f"unknown task kind {task_kind!r}")
