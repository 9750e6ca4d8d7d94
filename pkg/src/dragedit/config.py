"""Run configuration.

GuidanceConfig bundles the energy constants and loop parameters. Backend
profiles live in a keyed YAML file (a packaged default ships with the
library); environment variables override service-level settings.

Per-task weight and step-size defaults were calibrated once on the toy
backend (step size chosen so the first gated update is comparable in
magnitude to the denoiser output) and are plain defaults, not authoritative
values; every field can be overridden per request.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .backend.base import Backend, backend_factory
from .errors import ContractError

ENV_PROFILES_FILE = "DRAGEDIT_PROFILES"
ENV_BACKEND_PROFILE = "DRAGEDIT_BACKEND_PROFILE"
ENV_PORT = "DRAGEDIT_PORT"
ENV_STORAGE = "DRAGEDIT_STORAGE"
ENV_WORKERS = "DRAGEDIT_WORKERS"


@dataclass(frozen=True)
class GuidanceConfig:
    alpha: float = 1.0
    beta: float = 4.0
    w_edit: float = 1.0
    w_content: float = 1.0
    w_opt: float = 1.0
    w_inpaint: float = 2.5
    eta: float = 1.0
    n_gated: int = 30
    layers: tuple[int, ...] = (2, 3)
    similarity_mode: Optional[str] = None  # None: the task decides
    cfg_scale: float = 5.0
    steps: int = 50
    preview_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError("alpha and beta must be > 0")
        if not 0 <= self.n_gated <= self.steps:
            raise ContractError(f"gated step count {self.n_gated} outside 0..{self.steps}")
        if not set(self.layers) <= {1, 2, 3, 4}:
            raise ContractError(f"layers {self.layers} must be within 1..4")
        if not self.layers:
            raise ContractError("at least one feature layer is required")
        if self.cfg_scale < 1:
            raise ContractError("classifier-free guidance scale must be >= 1")
        if self.similarity_mode not in (None, "local", "global"):
            raise ContractError(f"unknown similarity mode {self.similarity_mode!r}")
        if self.preview_every < 1:
            raise ContractError("preview cadence must be >= 1")
        object.__setattr__(self, "layers", tuple(sorted(set(self.layers))))

    def to_config(self) -> dict:
        return {
            "v": 1,
            "alpha": self.alpha,
            "beta": self.beta,
            "w_edit": self.w_edit,
            "w_content": self.w_content,
            "w_opt": self.w_opt,
            "w_inpaint": self.w_inpaint,
            "eta": self.eta,
            "n_gated": self.n_gated,
            "layers": list(self.layers),
            "similarity_mode": self.similarity_mode,
            "cfg_scale": self.cfg_scale,
            "steps": self.steps,
            "preview_every": self.preview_every,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "GuidanceConfig":
        cfg = dict(cfg)
        cfg.pop("v", None)
        if "layers" in cfg:
            cfg["layers"] = tuple(cfg["layers"])
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ContractError(f"unknown guidance config fields: {sorted(unknown)}")
        return cls(**cfg)


# Which energy terms each task runs, and toy-calibrated magnitudes. w_opt is
# only meaningful where an inpainting region exists (moving, resizing).
# eta per task: chosen so the first gated update's max-abs roughly matches
# the noise estimate's max-abs on the toy backend (geometric mean over
# sampled instances, rounded).
TASK_DEFAULTS: dict[str, dict] = {
    "moving": {"w_edit": 1.0, "w_content": 1.0, "w_opt": 1.0, "eta": 2000.0},
    "resizing": {"w_edit": 1.0, "w_content": 1.0, "w_opt": 1.0, "eta": 7000.0},
    "replacing": {"w_edit": 1.0, "w_content": 1.0, "w_opt": 0.0, "eta": 5000.0},
    "pasting": {"w_edit": 1.0, "w_content": 1.0, "w_opt": 0.0, "eta": 1500.0},
    "dragging": {"w_edit": 1.0, "w_content": 1.0, "w_opt": 0.0, "eta": 2000.0},
    "reconstruct": {"w_edit": 0.0, "w_content": 0.0, "w_opt": 0.0, "eta": 0.0, "n_gated": 0},
}


def config_for_task(kind: str, overrides: Optional[dict] = None) -> GuidanceConfig:
    """Global defaults, then task defaults, then explicit overrides."""
    if kind not in TASK_DEFAULTS:
        raise ContractError(f"unknown task kind {kind!r}")
    cfg = GuidanceConfig().to_config()
    cfg.pop("v")
    cfg.update(TASK_DEFAULTS[kind])
    for k, v in (overrides or {}).items():
        if k not in cfg:
            raise ContractError(f"unknown guidance config field {k!r}")
        cfg[k] = v
    if kind in ("replacing", "pasting", "dragging"):
        cfg["w_opt"] = 0.0  # these tasks have no inpainting term
    if "n_gated" not in (overrides or {}):
        # short runs keep the default gate proportionally capped
        cfg["n_gated"] = min(cfg["n_gated"], cfg["steps"])
    return GuidanceConfig(**{**cfg, "layers": tuple(cfg["layers"])})


def apply_overrides(cfg: GuidanceConfig, overrides: dict) -> GuidanceConfig:
    unknown = set(overrides) - set(GuidanceConfig.__dataclass_fields__)
    if unknown:
        raise ContractError(f"unknown guidance config fields: {sorted(unknown)}")
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# profiles file
# ---------------------------------------------------------------------------


def default_profiles_path() -> Path:
    return Path(__file__).parent / "profiles.yaml"


def load_profiles(path: Optional[os.PathLike] = None) -> dict:
    """Parse the keyed profiles file (env var DRAGEDIT_PROFILES wins over the
    packaged default when no explicit path is given)."""
    if path is None:
        path = os.environ.get(ENV_PROFILES_FILE) or default_profiles_path()
    p = Path(path)
    if not p.exists():
        raise ContractError(f"profiles file not found: {p}")
    with open(p) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict) or "profiles" not in data:
        raise ContractError(f"profiles file {p} must contain a top-level 'profiles' map")
    return data


def make_backend(
    profile_name: str, profiles: Optional[dict] = None, seed: Optional[int] = None
) -> Backend:
    data = profiles if profiles is not None else load_profiles()
    try:
        cfg = data["profiles"][profile_name]
    except KeyError:
        raise ContractError(
            f"unknown backend profile {profile_name!r}; "
            f"available: {sorted(data['profiles'])}"
        )
    kind = cfg.get("backend")
    if not kind:
        raise ContractError(f"profile {profile_name!r} does not name a backend kind")
    return backend_factory(kind)(cfg, seed)


def service_settings(profiles: Optional[dict] = None) -> dict:
    """Service-level settings from the profiles file plus env overrides."""
    data = profiles if profiles is not None else load_profiles()
    svc = dict(data.get("service", {}))
    out = {
        "port": int(os.environ.get(ENV_PORT, svc.get("port", 8639))),
        "storage_dir": os.environ.get(ENV_STORAGE, svc.get("storage_dir", "./dragedit-data")),
        "backend_profile": os.environ.get(
            ENV_BACKEND_PROFILE, svc.get("backend_profile", "toy")
        ),
        "workers": int(os.environ.get(ENV_WORKERS, svc.get("workers", 1))),
    }
    if out["workers"] < 1:
        raise ContractError("worker count must be >= 1")
    return out
