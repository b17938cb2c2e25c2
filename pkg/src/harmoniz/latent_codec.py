"""Pixel/latent boundary: the encoder and decoder plus mask resampling.

Latents live in [-1, 1] (pixel 0 maps to -1, pixel 1 to +1). Both built-in
codecs are exactly invertible so out-of-mask preservation can be checked
bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Protocol

import torch
import torch.nn.functional as F

from harmoniz.diffusion_core import LatentTensor
from harmoniz.errors import ContractError, ParameterError, ShapeError

log = logging.getLogger(__name__)


def _is_binary(x: torch.Tensor) -> bool:
    return bool(((x == 0) | (x == 1)).all())


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """H×W×3 image with values in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"image must be H×W×3, got {tuple(self.data.shape)}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError("image must have positive height and width")
        if self.data.numel() and not bool(((self.data >= 0) & (self.data <= 1)).all()):
            raise ContractError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class PixelMask:
    """H×W binary mask; 1 marks the foreground."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ShapeError(f"mask must be H×W, got {tuple(self.data.shape)}")
        if not _is_binary(self.data):
            raise ContractError("mask must be binary")

    @property
    def is_empty(self) -> bool:
        return not bool(self.data.any())

    def matches(self, img: ImageTensor) -> bool:
        return tuple(self.data.shape) == (img.height, img.width)


@dataclass(frozen=True, eq=False)
class LatentMask:
    """h×w binary mask at latent resolution, broadcast over channels."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ShapeError(f"latent mask must be h×w, got {tuple(self.data.shape)}")
        if not _is_binary(self.data):
            raise ContractError("latent mask must be binary")

    def matches(self, lat: LatentTensor) -> bool:
        return tuple(self.data.shape) == tuple(lat.shape[1:])

    def as_bool(self) -> torch.Tensor:
        return self.data.bool()


class Codec(Protocol):
    factor: int
    latent_channels: int

    def encode_tensor(self, img: torch.Tensor) -> torch.Tensor: ...

    def decode_tensor(self, lat: torch.Tensor) -> torch.Tensor: ...


class IdentityCodec:
    """f = 1: the latent is the image remapped to [-1, 1], channels first."""

    factor = 1
    latent_channels = 3

    def encode_tensor(self, img: torch.Tensor) -> torch.Tensor:
        return (2.0 * img - 1.0).permute(2, 0, 1).contiguous()

    def decode_tensor(self, lat: torch.Tensor) -> torch.Tensor:
        return ((lat + 1.0) / 2.0).permute(1, 2, 0).contiguous()


class SpaceToDepthCodec:
    """Folds each f×f pixel block into 3·f² latent channels."""

    def __init__(self, factor: int):
        if factor not in (2, 4, 8):
            raise ParameterError(f"space-to-depth factor must be 2, 4 or 8, got {factor}")
        self.factor = factor
        self.latent_channels = 3 * factor * factor

    def encode_tensor(self, img: torch.Tensor) -> torch.Tensor:
        chw = (2.0 * img - 1.0).permute(2, 0, 1)
        return F.pixel_unshuffle(chw.unsqueeze(0), self.factor).squeeze(0).contiguous()

    def decode_tensor(self, lat: torch.Tensor) -> torch.Tensor:
        chw = F.pixel_shuffle(lat.unsqueeze(0), self.factor).squeeze(0)
        return ((chw + 1.0) / 2.0).permute(1, 2, 0).contiguous()


def make_codec(kind: Literal["identity", "space_to_depth"], factor: int = 1) -> Codec:
    if kind == "identity":
        return IdentityCodec()
    if kind == "space_to_depth":
        return SpaceToDepthCodec(factor)
    raise ParameterError(f"unknown codec {kind!r}")


def _check_divisible(h: int, w: int, f: int) -> None:
    if h % f or w % f:
        ph, pw = -h % f, -w % f
        raise ShapeError(
            f"size {h}×{w} is not divisible by codec factor {f}",
            hint=f"pad by {ph} rows and {pw} columns to {h + ph}×{w + pw}",
        )


def encode(img: ImageTensor, codec: Codec) -> LatentTensor:
    _check_divisible(img.height, img.width, codec.factor)
    return LatentTensor(codec.encode_tensor(img.data), 0)


def decode(lat: LatentTensor, codec: Codec) -> tuple[ImageTensor, float]:
    """Decode a clean latent. Returns the clamped image and the clamp fraction."""
    if lat.noise_level != 0:
        raise ContractError(f"cannot decode a latent at noise level {lat.noise_level}")
    pixels = codec.decode_tensor(lat.data.detach())
    out_of_range = (pixels < 0) | (pixels > 1)
    clamp_fraction = float(out_of_range.to(torch.float64).mean())
    if clamp_fraction > 0:
        log.warning("decode clamped %.4f of pixel values into [0, 1]", clamp_fraction)
    return ImageTensor(pixels.clamp(0.0, 1.0)), clamp_fraction


def resample_mask(m: PixelMask, f: int) -> LatentMask:
    """Area-average f×f blocks and threshold at 0.5, ties going to foreground."""
    h, w = m.data.shape
    _check_divisible(h, w, f)
    if f == 1:
        return LatentMask(m.data.clone())
    coverage = F.avg_pool2d(m.data.to(torch.float64)[None, None], kernel_size=f)[0, 0]
    return LatentMask((coverage >= 0.5).to(m.data.dtype))


def upsample_mask(m: LatentMask, f: int) -> PixelMask:
    return PixelMask(m.data.repeat_interleave(f, dim=0).repeat_interleave(f, dim=1))
