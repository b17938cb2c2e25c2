from __future__ import annotations

import math

import torch

from harmoniz.errors import ShapeError
from harmoniz.latent_codec import ImageTensor, PixelMask

PEAK = 1.0


def psnr(a: ImageTensor, b: ImageTensor, region: torch.Tensor | None = None) -> float:
    """Peak signal-to-noise ratio in dB over a boolean H×W region (peak 1.0).

    Identical regions report ``inf``; an empty region reports ``nan``.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    diff = (a.data.to(torch.float64) - b.data.to(torch.float64)) ** 2
    if region is not None:
        if region.shape != a.data.shape[:2]:
            raise ShapeError(f"region {tuple(region.shape)} does not match image {tuple(a.data.shape[:2])}")
        diff = diff[region.bool()]
    if diff.numel() == 0:
        return math.nan
    mse = float(diff.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK**2 / mse)


def region_psnrs(
    fused: ImageTensor, background: ImageTensor, foreground: ImageTensor, m: PixelMask
) -> tuple[float, float]:
    """(foreground PSNR vs the foreground image inside m, background PSNR
    vs the background image outside m)."""
    inside = m.data.bool()
    return psnr(fused, foreground, inside), psnr(fused, background, ~inside)
