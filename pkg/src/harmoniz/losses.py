"""Objective terms for the learnable latent.

Every term is differentiable with respect to the learnable latent. The
background style branch and the histogram-remapped target are constants:
they are computed without autograd and never receive gradient.
"""
from __future__ import annotations

from typing import Literal

import torch
import torch.nn.functional as F

from harmoniz.diffusion_core import DenoiserBackend, LatentTensor, TextEmbedding
from harmoniz.errors import ContractError, ShapeError
from harmoniz.latent_codec import LatentMask
from harmoniz.models import LossReport, LossWeights

StyleSource = Literal["output", "multiscale"]


def gram(features: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Channel Gram matrix of a c×h×w map, optionally divided by c·h·w."""
    c = features.shape[0]
    flat = features.reshape(c, -1)
    g = flat @ flat.T
    if normalize:
        g = g / flat.numel()
    return g


def style_features(
    x: torch.Tensor,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    source: StyleSource = "output",
) -> list[torch.Tensor]:
    if source == "output":
        return [backend.predict(x, t, c)]
    return backend.features(x, t, c)


def style_target(
    xG_t: LatentTensor,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    *,
    source: StyleSource = "output",
    normalize: bool = True,
) -> list[torch.Tensor]:
    """Gram matrices of the noised background; constant for the optimizer."""
    xG_t.require_level(t, "background style input")
    with torch.no_grad():
        return [gram(f, normalize) for f in style_features(xG_t.data, t, c, backend, source)]


def style_loss(
    xL_t: LatentTensor,
    xG_t: LatentTensor,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    *,
    source: StyleSource = "output",
    normalize: bool = True,
    target: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Squared Frobenius distance between the two branches' Gram matrices,
    summed over feature maps."""
    xL_t.require_level(t, "learnable style input")
    if target is None:
        target = style_target(xG_t, t, c, backend, source=source, normalize=normalize)
    else:
        xG_t.require_level(t, "background style input")
    feats = style_features(xL_t.data, t, c, backend, source)
    if len(feats) != len(target):
        raise ShapeError(f"{len(feats)} feature maps but {len(target)} style targets")
    loss = xL_t.data.new_zeros(())
    for f, g in zip(feats, target):
        loss = loss + ((gram(f, normalize) - g) ** 2).sum()
    return loss


def _require_clean_pair(a: LatentTensor, b: LatentTensor, what: str) -> None:
    a.require_level(0, f"{what} learnable latent")
    b.require_level(0, f"{what} reference latent")


def content_loss(
    xL: LatentTensor, xI: LatentTensor, mask: LatentMask | None = None
) -> torch.Tensor:
    """Mean squared error between the learnable and foreground latents."""
    _require_clean_pair(xL, xI, "content")
    if xL.shape != xI.shape:
        raise ShapeError(f"content shapes differ: {tuple(xL.shape)} vs {tuple(xI.shape)}")
    if mask is None:
        return F.mse_loss(xL.data, xI.data)
    m = mask.data.to(xL.data.dtype)
    sq = (xL.data - xI.data) ** 2 * m
    return sq.sum() / (m.sum() * xL.shape[0]).clamp_min(1)


def _rank_remap(src: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-row rank remap of ``src`` (c×n) onto the values of ``ref`` (c×m)."""
    n, m = src.shape[1], ref.shape[1]
    if n == 0 or m == 0:
        raise ContractError("histogram matching needs non-empty channels")
    ref_sorted, _ = torch.sort(ref, dim=1)
    if n == m:
        values = ref_sorted
    else:
        q = torch.arange(n, dtype=torch.float64) / max(n - 1, 1)
        if n == 1:
            q = torch.full((1,), 0.5, dtype=torch.float64)
        pos = q * (m - 1)
        lo = pos.floor().long()
        hi = (lo + 1).clamp_max(m - 1)
        frac = (pos - lo).to(ref.dtype)
        values = ref_sorted[:, lo] * (1 - frac) + ref_sorted[:, hi] * frac
    order = torch.argsort(src, dim=1, stable=True)
    out = torch.empty_like(src)
    out.scatter_(1, order, values.to(src.dtype))
    return out


def hist_match(source: LatentTensor, reference: LatentTensor) -> LatentTensor:
    """Replace the k-th smallest source value of each channel by the value at
    the same quantile of the reference channel. The result is a constant."""
    _require_clean_pair(source, reference, "histogram")
    if source.shape[0] != reference.shape[0]:
        raise ShapeError(
            f"channel counts differ: {source.shape[0]} vs {reference.shape[0]}"
        )
    c = source.shape[0]
    with torch.no_grad():
        remapped = _rank_remap(source.data.reshape(c, -1), reference.data.reshape(c, -1))
    return LatentTensor(remapped.reshape(source.shape), 0)


def hist_loss(
    xL: LatentTensor, xG: LatentTensor, mask: LatentMask | None = None
) -> torch.Tensor:
    """Mean squared distance between xL and its histogram-matched remap."""
    if mask is None:
        target = hist_match(xL, xG).data
        return F.mse_loss(xL.data, target)
    _require_clean_pair(xL, xG, "histogram")
    c = xL.shape[0]
    keep = mask.as_bool().reshape(-1)
    src = xL.data.reshape(c, -1)[:, keep]
    with torch.no_grad():
        target = _rank_remap(src.detach(), xG.data.reshape(c, -1))
    return F.mse_loss(src, target)


def tv_loss(x: LatentTensor, mask: LatentMask | None = None) -> torch.Tensor:
    """Sum of squared horizontal and vertical neighbour differences."""
    d = x.data
    dh = (d[:, :, 1:] - d[:, :, :-1]) ** 2
    dv = (d[:, 1:, :] - d[:, :-1, :]) ** 2
    if mask is not None:
        m = mask.data.to(d.dtype)
        dh = dh * (m[:, 1:] * m[:, :-1])
        dv = dv * (m[1:, :] * m[:-1, :])
    return dh.sum() + dv.sum()


def stability_loss(
    xL: LatentTensor,
    xG: LatentTensor,
    weights: LossWeights,
    mask: LatentMask | None = None,
) -> torch.Tensor:
    return weights.lambda_his * hist_loss(xL, xG, mask) + weights.lambda_tv * tv_loss(xL, mask)


def make_report(
    style: float,
    content: float,
    histogram: float,
    tv: float,
    weights: LossWeights,
    *,
    iteration: int = 0,
    round: int = 0,
    level: int = 0,
) -> LossReport:
    weighted_style = weights.omega_sty * style
    weighted_content = weights.omega_c * content
    weighted_stability = weights.omega_sta * (
        weights.lambda_his * histogram + weights.lambda_tv * tv
    )
    return LossReport(
        iteration=iteration,
        round=round,
        level=level,
        style=style,
        content=content,
        histogram=histogram,
        tv=tv,
        weighted_style=weighted_style,
        weighted_content=weighted_content,
        weighted_stability=weighted_stability,
        total=weighted_style + weighted_content + weighted_stability,
    )


def total_loss(
    xL: LatentTensor,
    content_ref: LatentTensor,
    xG: LatentTensor,
    xL_t: LatentTensor,
    xG_t: LatentTensor,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    weights: LossWeights,
    *,
    source: StyleSource = "output",
    normalize: bool = True,
    target: list[torch.Tensor] | None = None,
    mask: LatentMask | None = None,
    iteration: int = 0,
    round: int = 0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted objective. Returns the differentiable scalar and its report.

    ``content_ref`` is the foreground latent (or the background latent in
    ``literal_objective`` mode); ``xG`` is the clean background used as the histogram
    reference.
    """
    sty = style_loss(
        xL_t, xG_t, t, c, backend, source=source, normalize=normalize, target=target
    )
    con = content_loss(xL, content_ref, mask)
    his = hist_loss(xL, xG, mask)
    tv = tv_loss(xL, mask)
    total = (
        weights.omega_sty * sty
        + weights.omega_c * con
        + weights.omega_sta * (weights.lambda_his * his + weights.lambda_tv * tv)
    )
    report = make_report(
        *(term.detach().item() for term in (sty, con, his, tv)), weights,
        iteration=iteration, round=round, level=t,
    )
    return total, report
