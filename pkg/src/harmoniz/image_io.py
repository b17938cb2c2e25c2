from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from harmoniz.errors import ConfigError
from harmoniz.latent_codec import ImageTensor, PixelMask

MASK_THRESHOLD = 128


def _read(path: Path, mode: str, field: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise ConfigError(field, f"cannot read {path} as an image: {exc}") from exc


def load_image(path: Path, dtype: torch.dtype = torch.float64, *, field: str = "image") -> ImageTensor:
    """Read an 8-bit PNG as an RGB image in [0, 1]."""
    arr = _read(path, "RGB", field).astype(np.float64) / 255.0
    return ImageTensor(torch.from_numpy(arr).to(dtype))


def load_mask(path: Path, dtype: torch.dtype = torch.float64, *, field: str = "mask") -> PixelMask:
    """Read a single-channel PNG; pixels ≥ 128 are foreground."""
    arr = _read(path, "L", field)
    return PixelMask(torch.from_numpy(arr >= MASK_THRESHOLD).to(dtype))


def to_uint8(img: ImageTensor) -> np.ndarray:
    return (img.data.detach().to(torch.float64).clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()


def png_bytes(img: ImageTensor) -> bytes:
    """Encode as 8-bit RGB PNG bytes."""
    output = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(output, format="PNG")
    return output.getvalue()


def mask_png_bytes(m: PixelMask) -> bytes:
    arr = (m.data.detach().cpu().numpy() > 0).astype(np.uint8) * 255
    output = io.BytesIO()
    Image.fromarray(arr).save(output, format="PNG")
    return output.getvalue()


def save_image(img: ImageTensor, path: Path) -> str:
    """Write a PNG and return the SHA-256 of its bytes."""
    data = png_bytes(img)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return sha256_hex(data)


def save_mask(m: PixelMask, path: Path) -> str:
    data = mask_png_bytes(m)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return sha256_hex(data)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_sha256(x: torch.Tensor) -> str:
    """Content hash of a tensor's dtype, shape and raw bytes."""
    t = x.detach().cpu().contiguous()
    h = hashlib.sha256()
    h.update(f"{t.dtype}:{tuple(t.shape)}".encode())
    h.update(t.numpy().tobytes())
    return h.hexdigest()
