"""Deterministic inversion and the per-step memory bank.

Inversion walks a clean latent forward to the noise prior with the schedule's
recursion; at each timestep it records the latent plus the decoder
self-attention K/V of that step's denoiser pass (conditional pass only, at
guidance scale 1). Sampling later replays these records: latents feed the
guided feature branch, K/V feed attention substitution.

Bank container on disk: a directory holding manifest.json plus one binary
blob per timestep. Blob layout (all integers little-endian):

    u32   tensor count
    per tensor:
      u16   name length, then the UTF-8 name
      u8    dtype tag (0 = float64, 1 = float32)
      u8    rank
      u32*  dims
      raw   values, little-endian, C order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backend.base import AttentionRecord, Backend, Capture, Latent
from .errors import BankError, ContractError

_DTYPE_TAGS = {"float64": 0, "float32": 1}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TORCH_DTYPES = {0: torch.float64, 1: torch.float32}
MANIFEST_NAME = "manifest.json"
BANK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BankEntry:
    t: int
    z_gud: Latent
    kv_gud: AttentionRecord
    z_ref: Optional[Latent] = None
    kv_ref: Optional[AttentionRecord] = None

    def __post_init__(self):
        if (self.z_ref is None) != (self.kv_ref is None):
            raise ContractError("reference latent and reference K/V must come together")

    @property
    def has_reference(self) -> bool:
        return self.z_ref is not None


class MemoryBank:
    """Immutable map t -> BankEntry for t = 1..t_max."""

    def __init__(self, entries: dict[int, BankEntry], t_max: int, profile_hash: str):
        if set(entries) != set(range(1, t_max + 1)):
            raise ContractError(
                f"bank must hold exactly t = 1..{t_max}, got {len(entries)} entries"
            )
        refs = {e.has_reference for e in entries.values()}
        if len(refs) != 1:
            raise ContractError("reference presence must be uniform across bank entries")
        self._entries = dict(entries)
        self.t_max = t_max
        self.profile_hash = profile_hash
        self.has_reference = refs.pop()

    @property
    def z_T_gen(self) -> Latent:
        """The inversion prior: sampling starts from the final inverted latent."""
        return self._entries[self.t_max].z_gud

    def lookup(self, t: int) -> BankEntry:
        if t not in self._entries:
            raise ContractError(f"bank lookup t={t} outside 1..{self.t_max}")
        return self._entries[t]

    @property
    def entries(self) -> dict[int, BankEntry]:
        return dict(self._entries)


def lookup(bank: MemoryBank, t: int) -> BankEntry:
    return bank.lookup(t)


def inversion_step(z: torch.Tensor, eps: torch.Tensor, t_next: int, alpha_bar) -> torch.Tensor:
    """One forward recursion step: z_{t_next} from z_{t_next-1} and its noise
    estimate. Algebraically inverted by the sampler's update with the same eps."""
    a_cur = alpha_bar(t_next - 1)
    a_next = alpha_bar(t_next)
    x0 = (z - (1.0 - a_cur) ** 0.5 * eps) / a_cur ** 0.5
    return a_next ** 0.5 * x0 + (1.0 - a_next) ** 0.5 * eps


def _invert_stream(
    backend: Backend, z0: Latent, t_max: int, text_cond
) -> tuple[list[tuple[int, Latent, AttentionRecord]], Latent]:
    records = []
    z = z0.data
    for t in range(t_max):
        capture = Capture.KV if t >= 1 else Capture.NONE
        out = backend.predict(Latent(z), t, text_cond=text_cond, capture=capture)
        if t >= 1:
            records.append((t, Latent(z), out.attention.detached()))
        z = inversion_step(z, out.noise_pred, t + 1, backend.alpha_bar)
    out = backend.predict(Latent(z), t_max, text_cond=text_cond, capture=Capture.KV)
    records.append((t_max, Latent(z), out.attention.detached()))
    return records, Latent(z)


def invert(
    backend: Backend,
    z0: Latent,
    z0_ref: Optional[Latent],
    t_max: int,
    text_cond=None,
) -> MemoryBank:
    """Build the memory bank for an image (and an optional reference image)."""
    if z0_ref is not None and z0_ref.shape != z0.shape:
        raise ContractError(
            f"original/reference latent shapes differ: {z0.shape} vs {z0_ref.shape}"
        )
    if t_max < 1 or t_max > backend.profile.timestep_count_max:
        raise ContractError(
            f"step count {t_max} outside schedule 1..{backend.profile.timestep_count_max}"
        )
    with torch.no_grad():
        gud, _ = _invert_stream(backend, z0, t_max, text_cond)
        ref = None
        if z0_ref is not None:
            ref, _ = _invert_stream(backend, z0_ref, t_max, text_cond)
    entries = {}
    for i, (t, z, kv) in enumerate(gud):
        z_ref = kv_ref = None
        if ref is not None:
            _, z_ref, kv_ref = ref[i]
        entries[t] = BankEntry(t, z, kv, z_ref, kv_ref)
    return MemoryBank(entries, t_max, backend.profile.content_hash())


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def write_tensor_blob(path: Path, tensors: dict[str, torch.Tensor]) -> None:
    parts = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype == np.float64:
            tag = 0
        elif arr.dtype == np.float32:
            tag = 1
        else:
            raise BankError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())
    path.write_bytes(b"".join(parts))


def read_tensor_blob(path: Path) -> dict[str, torch.Tensor]:
    raw = path.read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        try:
            vals = struct.unpack_from(fmt, view, pos)
        except struct.error as exc:
            raise BankError(f"{path.name}: truncated blob header") from exc
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        tag, rank = take("<BB")
        if tag not in _TAG_DTYPES:
            raise BankError(f"{path.name}: unknown dtype tag {tag}")
        dims = take(f"<{rank}I")
        np_dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(dims)) * np_dtype.itemsize if rank else np_dtype.itemsize
        if pos + n_bytes > len(view):
            raise BankError(f"{path.name}: truncated tensor data for {name!r}")
        arr = np.frombuffer(view[pos : pos + n_bytes], dtype=np_dtype).reshape(dims)
        pos += n_bytes
        out[name] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[tag])
    if pos != len(raw):
        raise BankError(f"{path.name}: {len(raw) - pos} trailing bytes")
    return out


def _entry_tensors(entry: BankEntry) -> dict[str, torch.Tensor]:
    tensors = {"z_gud": entry.z_gud.data}
    for layer, (k, v) in sorted(entry.kv_gud.sites.items()):
        tensors[f"kv_gud.{layer}.k"] = k
        tensors[f"kv_gud.{layer}.v"] = v
    if entry.z_ref is not None:
        tensors["z_ref"] = entry.z_ref.data
        for layer, (k, v) in sorted(entry.kv_ref.sites.items()):
            tensors[f"kv_ref.{layer}.k"] = k
            tensors[f"kv_ref.{layer}.v"] = v
    return tensors


def _entry_from_tensors(t: int, tensors: dict[str, torch.Tensor]) -> BankEntry:
    def record(prefix: str) -> Optional[AttentionRecord]:
        sites: dict[int, list] = {}
        for name, tensor in tensors.items():
            if name.startswith(prefix + "."):
                _, layer, which = name.split(".")
                sites.setdefault(int(layer), [None, None])[0 if which == "k" else 1] = tensor
        if not sites:
            return None
        return AttentionRecord({l: (k, v) for l, (k, v) in sites.items()})

    z_ref = tensors.get("z_ref")
    return BankEntry(
        t=t,
        z_gud=Latent(tensors["z_gud"]),
        kv_gud=record("kv_gud"),
        z_ref=Latent(z_ref) if z_ref is not None else None,
        kv_ref=record("kv_ref"),
    )


def _step_name(t: int) -> str:
    return f"step_{t:04d}.bin"


def save_bank(bank: MemoryBank, directory, extras: Optional[dict] = None) -> None:
    """extras (prompt, timings, ...) are merged into the manifest; they may
    not shadow structural keys."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sample = bank.lookup(1)
    manifest = {
        "v": BANK_FORMAT_VERSION,
        "t_max": bank.t_max,
        "has_reference": bank.has_reference,
        "profile_hash": bank.profile_hash,
        "latent_shape": list(sample.z_gud.shape),
        "dtype": "float64",
        "tokens_per_site": {
            str(l): k.shape[1] for l, (k, _) in sorted(sample.kv_gud.sites.items())
        },
        "files": [_step_name(t) for t in range(1, bank.t_max + 1)],
    }
    for key, value in (extras or {}).items():
        if key in manifest:
            raise BankError(f"manifest extra {key!r} collides with a structural key")
        manifest[key] = value
    for t in range(1, bank.t_max + 1):
        write_tensor_blob(d / _step_name(t), _entry_tensors(bank.lookup(t)))
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise BankError(f"{directory} is not a bank container (no {MANIFEST_NAME})")
    return json.loads(path.read_text())


def load_bank(directory, expected_profile_hash: Optional[str] = None) -> MemoryBank:
    d = Path(directory)
    manifest_path = d / MANIFEST_NAME
    if not manifest_path.exists():
        raise BankError(f"{d} is not a bank container (no {MANIFEST_NAME})")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("v") != BANK_FORMAT_VERSION:
        raise BankError(f"unsupported bank format version {manifest.get('v')!r}")
    if expected_profile_hash is not None and manifest["profile_hash"] != expected_profile_hash:
        raise BankError(
            "bank was built under a different backend profile "
            f"({manifest['profile_hash']} != {expected_profile_hash})"
        )
    entries = {}
    for t in range(1, manifest["t_max"] + 1):
        entries[t] = _entry_from_tensors(t, read_tensor_blob(d / _step_name(t)))
    return MemoryBank(entries, manifest["t_max"], manifest["profile_hash"])
