"""PNG image exchange. Images are 8-bit RGB on disk and float tensors
[3, H, W] in [0, 1] in memory."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ContractError


def image_from_bytes(raw: bytes) -> torch.Tensor:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise ContractError(f"not a decodable image: {exc}")
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_image(path) -> torch.Tensor:
    p = Path(path)
    if not p.exists():
        raise ContractError(f"image file not found: {p}")
    return image_from_bytes(p.read_bytes())


def image_to_png_bytes(image: torch.Tensor) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected [3,H,W] image tensor, got {tuple(image.shape)}")
    arr = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    img = Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_image(image: torch.Tensor, path) -> None:
    Path(path).write_bytes(image_to_png_bytes(image))


def content_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()[:16]
