"""Training-free drag-style image editing on diffusion latents.

The pipeline: invert an image into a per-step memory bank, then resample
with attention substitution and an energy gradient steering the noise
estimate toward the requested edit (move, resize, replace, paste, drag).
"""

from .backend import (
    AttentionRecord,
    Backend,
    BackendProfile,
    Capture,
    DenoiseOutput,
    FeatureStack,
    Latent,
    LinearBetaSchedule,
    ToyBackend,
)
from .config import GuidanceConfig, config_for_task, load_profiles, make_backend
from .errors import BankError, ContractError, GuidanceError
from .inversion import BankEntry, MemoryBank, invert, load_bank, lookup, save_bank
from .masks import Mask
from .sampler import SampleRunState, StepRecord, cfg_noise, ddim_step, run
from .tasks import (
    DragPointSet,
    EditSpec,
    PairingMap,
    build_dragging,
    build_moving,
    build_pasting,
    build_replacing,
    build_resizing,
    from_payload,
    to_payload,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "Backend",
    "BackendProfile",
    "BankEntry",
    "BankError",
    "Capture",
    "ContractError",
    "DenoiseOutput",
    "DragPointSet",
    "EditSpec",
    "FeatureStack",
    "GuidanceConfig",
    "GuidanceError",
    "Latent",
    "LinearBetaSchedule",
    "Mask",
    "MemoryBank",
    "PairingMap",
    "SampleRunState",
    "StepRecord",
    "ToyBackend",
    "build_dragging",
    "build_moving",
    "build_pasting",
    "build_replacing",
    "build_resizing",
    "cfg_noise",
    "config_for_task",
    "ddim_step",
    "from_payload",
    "invert",
    "load_bank",
    "load_profiles",
    "lookup",
    "make_backend",
    "run",
    "save_bank",
    "to_payload",
    "__version__",
]
