from .base import (
    AttentionRecord,
    Backend,
    BackendProfile,
    Capture,
    DenoiseOutput,
    FeatureStack,
    Latent,
    backend_factory,
    register_backend,
)
from .schedules import LinearBetaSchedule, schedule_from_config
from .toy import ToyBackend
from . import adapter  # noqa: F401  (registers the external backend kind)

__all__ = [
    "AttentionRecord",
    "Backend",
    "BackendProfile",
    "Capture",
    "DenoiseOutput",
    "FeatureStack",
    "Latent",
    "LinearBetaSchedule",
    "ToyBackend",
    "backend_factory",
    "register_backend",
    "schedule_from_config",
]
