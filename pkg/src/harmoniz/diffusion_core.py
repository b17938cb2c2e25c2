"""Noise schedules, forward noising, reverse denoising steps and the frozen
denoiser interface.

Step indices are 1-based: step ``t`` uses ``betas[t - 1]``. Level 0 is the
clean latent and ``alpha_bar(0) == 1`` by convention, so the last ancestral
step is noiseless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Protocol, runtime_checkable

import logfire
import torch

from harmoniz.errors import ContractError, NumericError, ParameterError, ShapeError


class Sampler(StrEnum):
    ANCESTRAL = "ancestral"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variance plan. ``betas`` holds beta_1..beta_T in float64."""

    betas: torch.Tensor
    alphas: torch.Tensor = field(init=False)
    alpha_bars: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        betas = self.betas.detach().to(torch.float64).clone()
        if betas.ndim != 1 or betas.numel() < 1:
            raise ParameterError("betas must be a non-empty 1-D tensor")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ParameterError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", torch.cumprod(alphas, dim=0))

    @property
    def T(self) -> int:
        return self.betas.numel()

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ParameterError(f"step index {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self.check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def sigma2(self, t: int) -> float:
        """Ancestral variance ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t."""
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """A c×h×w latent plus the noise level it currently sits at."""

    data: torch.Tensor
    noise_level: int = 0

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"latent must be c×h×w, got shape {tuple(self.data.shape)}")
        if self.noise_level < 0:
            raise ParameterError(f"noise level {self.noise_level} is negative")

    @property
    def shape(self) -> torch.Size:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.data.requires_grad

    def require_level(self, t: int, what: str = "latent") -> None:
        if self.noise_level != t:
            raise ContractError(
                f"{what} is at noise level {self.noise_level}, expected {t}"
            )

    def detach(self) -> LatentTensor:
        return LatentTensor(self.data.detach(), self.noise_level)


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    """L×d token embeddings produced by a text encoder."""

    tokens: torch.Tensor

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"text embedding must be L×d with L ≥ 1, got {tuple(self.tokens.shape)}")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def to(self, dtype: torch.dtype) -> TextEmbedding:
        return TextEmbedding(self.tokens.to(dtype))


@runtime_checkable
class DenoiserBackend(Protocol):
    """The frozen eps_theta(x, t, c) every backend adapter must provide.

    ``predict`` takes an unbatched c×h×w tensor and must let gradients flow
    back to ``x`` without updating its own parameters.
    """

    schedule: NoiseSchedule
    latent_channels: int
    embed_dim: int
    content_hash: str

    def predict(self, x: torch.Tensor, t: int, c: TextEmbedding) -> torch.Tensor: ...

    def features(self, x: torch.Tensor, t: int, c: TextEmbedding) -> list[torch.Tensor]: ...

    def embed_text(self, prompt: str) -> TextEmbedding: ...


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if T < 2:
        raise ParameterError(f"T must be at least 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def check_finite(x: torch.Tensor, what: str, step: int | None = None) -> None:
    if not bool(torch.isfinite(x).all()):
        where = f" at step {step}" if step is not None else ""
        raise NumericError(f"non-finite values in {what}{where}", step=step)


def standard_normal(
    like: torch.Tensor, generator: torch.Generator | None
) -> torch.Tensor:
    if generator is None:
        raise ContractError("stochastic draws need the run's seeded generator")
    return torch.randn(
        like.shape, generator=generator, dtype=like.dtype, device=like.device
    )


def forward_noise(
    x0: LatentTensor,
    t: int,
    eps: torch.Tensor | None,
    sched: NoiseSchedule,
    *,
    generator: torch.Generator | None = None,
) -> LatentTensor:
    """Sample the level-t latent sqrt(abar_t)·x0 + sqrt(1 - abar_t)·eps."""
    x0.require_level(0, "forward_noise input")
    sched.check_step(t)
    if eps is None:
        eps = standard_normal(x0.data, generator)
    elif eps.shape != x0.shape:
        raise ShapeError(
            f"noise shape {tuple(eps.shape)} does not match latent {tuple(x0.shape)}"
        )
    abar = sched.alpha_bar(t)
    xt = math.sqrt(abar) * x0.data + math.sqrt(1.0 - abar) * eps
    return LatentTensor(xt, t)


def predicted_x0(xt: LatentTensor, eps: torch.Tensor, sched: NoiseSchedule) -> LatentTensor:
    """Closed-form clean estimate (x_t - sqrt(1 - abar_t)·eps) / sqrt(abar_t)."""
    t = xt.noise_level
    if t == 0:
        return xt
    abar = sched.alpha_bar(t)
    return LatentTensor((xt.data - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar), 0)


def step_from_eps(
    xt: LatentTensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    sampler: Sampler,
    *,
    generator: torch.Generator | None = None,
    z: torch.Tensor | None = None,
) -> LatentTensor:
    """Move one level down given a noise prediction for ``xt``."""
    t = xt.noise_level
    if t == 0:
        raise ParameterError("cannot take a reverse step from a clean latent")
    sched.check_step(t)

    if sampler is Sampler.DETERMINISTIC:
        abar_prev = sched.alpha_bar(t - 1)
        x0 = predicted_x0(xt, eps, sched).data
        out = math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * eps
        return LatentTensor(out, t - 1)

    alpha = sched.alpha(t)
    abar = sched.alpha_bar(t)
    mean = (xt.data - (1.0 - alpha) / math.sqrt(1.0 - abar) * eps) / math.sqrt(alpha)
    sigma = math.sqrt(sched.sigma2(t))
    if sigma == 0.0:
        return LatentTensor(mean, t - 1)
    if z is None:
        z = standard_normal(xt.data, generator)
    return LatentTensor(mean + sigma * z, t - 1)


def reverse_step(
    xt: LatentTensor,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    sampler: Sampler = Sampler.ANCESTRAL,
    *,
    generator: torch.Generator | None = None,
    z: torch.Tensor | None = None,
) -> LatentTensor:
    """One denoising step from level t to t - 1.

    Pass ``z`` to share the ancestral step noise between callers; otherwise
    it is drawn from ``generator``.
    """
    if t == 0:
        raise ParameterError("cannot take a reverse step at t = 0")
    sched.check_step(t)
    xt.require_level(t, "reverse_step input")
    eps = backend.predict(xt.data, t, c)
    check_finite(eps, "denoiser output", step=t)
    out = step_from_eps(xt, eps, sched, sampler, generator=generator, z=z)
    check_finite(out.data, "reverse step output", step=t)
    return out


def run_denoise(
    x: LatentTensor,
    c: TextEmbedding,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    sampler: Sampler = Sampler.ANCESTRAL,
    *,
    generator: torch.Generator | None = None,
    rng_seed: int | None = None,
) -> LatentTensor:
    """Denoise from x's level all the way to a clean latent.

    Step noise comes from ``generator``, or from a fresh one seeded with
    ``rng_seed``.
    """
    t = x.noise_level
    if t < 1:
        raise ParameterError("run_denoise needs a noised latent (level ≥ 1)")
    if generator is None and rng_seed is not None:
        generator = torch.Generator().manual_seed(rng_seed)
    with logfire.span("run_denoise", start_level=t, sampler=str(sampler)):
        for s in range(t, 0, -1):
            x = reverse_step(x, s, c, backend, sched, sampler, generator=generator)
    return x
