"""Procedural styled-texture images for training the toy denoiser and for
harmonization fixtures.

A style is a two-colour palette plus a pattern; a sample is a shape drawn
with the style's swapped palette over a background in the same style. Every
image is fully determined by its seed.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch

from harmoniz.errors import ParameterError
from harmoniz.latent_codec import ImageTensor, PixelMask
from harmoniz.models import SHAPES, STYLES, DatasetSpec, FixtureSpec

PALETTES: dict[str, tuple[tuple[float, float, float], tuple[float, float, float]]] = {
    "flat": ((0.82, 0.52, 0.28), (0.35, 0.18, 0.12)),
    "stripes": ((0.18, 0.30, 0.70), (0.92, 0.90, 0.80)),
    "grain": ((0.22, 0.55, 0.25), (0.75, 0.85, 0.45)),
    "gradient": ((0.45, 0.15, 0.55), (0.98, 0.82, 0.25)),
}
PALETTE_JITTER = 0.05
PLAIN_GROUND = 0.5


def _uniform(g: torch.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=g, dtype=torch.float64))


def _grid(size: int) -> tuple[torch.Tensor, torch.Tensor]:
    coords = (torch.arange(size, dtype=torch.float64) + 0.5) / size
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    return yy, xx


def pattern(style: str, size: int, g: torch.Generator) -> torch.Tensor:
    """Mixing field in [0, 1] between a style's two palette colours."""
    yy, xx = _grid(size)
    if style == "flat":
        return torch.zeros(size, size, dtype=torch.float64)
    if style == "stripes":
        freq = _uniform(g, 4.0, 8.0)
        angle = _uniform(g, 0.0, math.pi)
        phase = _uniform(g)
        u = xx * math.cos(angle) + yy * math.sin(angle)
        return torch.floor(u * freq + phase).remainder(2.0)
    if style == "grain":
        return torch.rand(size, size, generator=g, dtype=torch.float64)
    if style == "gradient":
        angle = _uniform(g, 0.0, 2 * math.pi)
        u = (xx - 0.5) * math.cos(angle) + (yy - 0.5) * math.sin(angle)
        return (u / math.sqrt(2) + 0.5).clamp(0.0, 1.0)
    raise ParameterError(f"unknown style {style!r}; expected one of {STYLES}")


def shape_mask(shape: str, size: int, g: torch.Generator, radius: float | None = None) -> torch.Tensor:
    """Binary H×W mask of a disc, square or triangle at a jittered centre."""
    yy, xx = _grid(size)
    r = _uniform(g, 0.18, 0.3) if radius is None else radius
    cy = _uniform(g, 0.5 - 0.1, 0.5 + 0.1)
    cx = _uniform(g, 0.5 - 0.1, 0.5 + 0.1)
    if shape == "disc":
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    elif shape == "square":
        inside = ((xx - cx).abs() <= r) & ((yy - cy).abs() <= r)
    elif shape == "triangle":
        top = cy - r
        inside = (yy >= top) & (yy <= cy + r) & ((xx - cx).abs() <= (yy - top) / 2)
    else:
        raise ParameterError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    return inside.to(torch.float64)


def _palette(style: str, g: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    if style not in PALETTES:
        raise ParameterError(f"unknown style {style!r}; expected one of {STYLES}")
    a, b = (torch.tensor(col, dtype=torch.float64) for col in PALETTES[style])
    jitter = (torch.rand(2, 3, generator=g, dtype=torch.float64) - 0.5) * 2 * PALETTE_JITTER
    return (a + jitter[0]).clamp(0, 1), (b + jitter[1]).clamp(0, 1)


def render_style(style: str, size: int, g: torch.Generator, swap: bool = False) -> torch.Tensor:
    """H×W×3 texture of ``style``; ``swap`` exchanges the palette colours."""
    a, b = _palette(style, g)
    if swap:
        a, b = b, a
    p = pattern(style, size, g)[..., None]
    return a * (1 - p) + b * p


def render_sample(shape: str, style: str, size: int, g: torch.Generator) -> torch.Tensor:
    background = render_style(style, size, g)
    foreground = render_style(style, size, g, swap=True)
    m = shape_mask(shape, size, g)[..., None]
    return background * (1 - m) + foreground * m


@dataclass(frozen=True)
class TextureSample:
    image: torch.Tensor
    shape: str
    style: str

    @property
    def prompt(self) -> str:
        return f"{self.shape} {self.style}"


class TextureDataset:
    """Labelled shape-over-texture images, regenerable bit-exactly from their DatasetSpec."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        g = torch.Generator().manual_seed(spec.seed)
        images: list[torch.Tensor] = []
        self.shapes: list[str] = []
        self.styles: list[str] = []
        for _ in range(spec.num_samples):
            shape = spec.shapes[int(torch.randint(len(spec.shapes), (), generator=g))]
            style = spec.styles[int(torch.randint(len(spec.styles), (), generator=g))]
            images.append(render_sample(shape, style, spec.size, g).to(torch.float32))
            self.shapes.append(shape)
            self.styles.append(style)
        self.images = torch.stack(images)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx: int) -> TextureSample:
        return TextureSample(self.images[idx], self.shapes[idx], self.styles[idx])

    def prompt(self, idx: int) -> str:
        return f"{self.shapes[idx]} {self.styles[idx]}"

    def split(self) -> tuple[list[int], list[int]]:
        """Deterministic train/validation index split (validation at the tail)."""
        n_val = int(len(self) * self.spec.val_fraction)
        if len(self) > 1 and self.spec.val_fraction > 0:
            n_val = max(n_val, 1)
        cut = len(self) - n_val
        return list(range(cut)), list(range(cut, len(self)))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.model_dump_json().encode())
        h.update(self.images.numpy().tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class HarmonizationFixture:
    background: ImageTensor
    foreground: ImageTensor
    mask: PixelMask
    spec: FixtureSpec


def harmonization_fixture(spec: FixtureSpec, dtype: torch.dtype = torch.float64) -> HarmonizationFixture:
    """Foreground shape on a plain ground, its mask, and a styled background."""
    g = torch.Generator().manual_seed(spec.seed)
    m = shape_mask(spec.shape, spec.size, g)
    shape_texture = render_style(spec.foreground_style, spec.size, g)
    ground = torch.full_like(shape_texture, PLAIN_GROUND)
    foreground = ground * (1 - m[..., None]) + shape_texture * m[..., None]
    background = render_style(spec.background_style, spec.size, g)
    return HarmonizationFixture(
        background=ImageTensor(background.to(dtype)),
        foreground=ImageTensor(foreground.to(dtype)),
        mask=PixelMask(m.to(dtype)),
        spec=spec,
    )
