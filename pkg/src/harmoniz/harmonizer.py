"""The end-to-end harmonization loop.

The learnable latent x_L stays clean and is re-noised on demand. Each outer
iteration i (t_aug down to 1):

1. draw eps_L, eps_G from the run generator and noise x_L and the running
   clean background estimate to level i;
2. run ``inner_rounds`` optimizer rounds on x_L against the weighted loss,
   with eps_L held fixed so every round sees the same objective;
3. take one shared-noise reverse step on both branches and blend them with
   the latent mask (the masked composite update);
4. replace the clean background estimate with the predicted-clean
   projection of the composite at level i - 1 (or, with
   ``background_estimate="branchwise"``, the mask-blend of each branch's
   projection). At i = 1 the composite itself is clean and becomes the
   fused latent.

With ``background_branch="composite"`` the background branch denoises the
noised running estimate, so a spatially mixing denoiser sees the blended
foreground from the previous iteration. ``"isolated"`` feeds it a separate
background-only trajectory instead (same eps_G and step noise), which makes
the fused latent outside the mask identical to a run with an empty mask for
any denoiser.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import logfire
import torch

from harmoniz import __version__
from harmoniz.diffusion_core import (
    DenoiserBackend,
    LatentTensor,
    NoiseSchedule,
    Sampler,
    TextEmbedding,
    check_finite,
    forward_noise,
    predicted_x0,
    reverse_step,
    standard_normal,
)
from harmoniz.errors import ContractError, NumericError, ShapeError
from harmoniz.image_io import tensor_sha256
from harmoniz.latent_codec import (
    Codec,
    ImageTensor,
    LatentMask,
    PixelMask,
    decode,
    encode,
    resample_mask,
)
from harmoniz.losses import style_target, total_loss
from harmoniz.models import HarmonizeConfig, LossReport, OptimizerEvent, RunRecord

FALLBACK_MAX_STEP = 1e-2  # largest per-element change of a fallback gradient step


@dataclass
class HarmonizeResult:
    fused_image: ImageTensor
    fused_latent: LatentTensor
    loss_trace: list[LossReport]
    final_reports: list[LossReport]  # loss after each iteration's optimization
    record: RunRecord
    pre_refinement_image: ImageTensor
    snapshots: list[torch.Tensor] = field(default_factory=list)


@dataclass
class _Branches:
    background: LatentTensor
    foreground: LatentTensor
    composite: LatentTensor


def _blend(background: torch.Tensor, foreground: torch.Tensor, m: LatentMask) -> torch.Tensor:
    return torch.where(m.as_bool().unsqueeze(0), foreground, background)


def _branch_update(
    xG_t: LatentTensor,
    xL_t: LatentTensor,
    m: LatentMask,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    sampler: Sampler,
    generator: torch.Generator | None,
    z: torch.Tensor | None,
) -> _Branches:
    xG_t.require_level(t, "background branch")
    xL_t.require_level(t, "learnable branch")
    if not m.matches(xG_t) or xG_t.shape != xL_t.shape:
        raise ShapeError(
            f"mask {tuple(m.data.shape)} and latents {tuple(xG_t.shape)}, "
            f"{tuple(xL_t.shape)} do not line up"
        )
    if z is None and sampler is Sampler.ANCESTRAL and sched.sigma2(t) > 0:
        z = standard_normal(xG_t.data, generator)
    bg = reverse_step(xG_t, t, c, backend, sched, sampler, z=z)
    fg = reverse_step(xL_t, t, c, backend, sched, sampler, z=z)
    return _Branches(bg, fg, LatentTensor(_blend(bg.data, fg.data, m), t - 1))


def composite_update(
    xG_t: LatentTensor,
    xL_t: LatentTensor,
    m: LatentMask,
    t: int,
    c: TextEmbedding,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    sampler: Sampler = Sampler.ANCESTRAL,
    *,
    generator: torch.Generator | None = None,
    z: torch.Tensor | None = None,
) -> LatentTensor:
    """DM(x_G^t) outside the mask, DM(x_L^t) inside it, one shared step noise."""
    return _branch_update(xG_t, xL_t, m, t, c, backend, sched, sampler, generator, z).composite


def _project(branch: LatentTensor, c: TextEmbedding, backend: DenoiserBackend, sched: NoiseSchedule) -> torch.Tensor:
    level = branch.noise_level
    eps = backend.predict(branch.data, level, c)
    check_finite(eps, "denoiser output", step=level)
    return predicted_x0(branch, eps, sched).data


def _cast_backend(backend: DenoiserBackend, dtype: torch.dtype) -> DenoiserBackend:
    to = getattr(backend, "to", None)
    return to(dtype) if callable(to) else backend


def _check_frozen(backend: DenoiserBackend) -> None:
    check = getattr(backend, "check_frozen", None)
    if callable(check):
        check()


def design_flags(cfg: HarmonizeConfig) -> dict[str, str]:
    """How the ambiguous parts of the procedure were resolved for this run."""
    return {
        "augmentation_level": "outer loop index i",
        "style_inputs": "noised latents at level i",
        "content_target": "x_I" if cfg.content_target == "foreground" else "x_G",
        "gram_normalize": str(cfg.gram_normalize).lower(),
        "style_source": cfg.style_source,
        "loss_region": cfg.loss_region,
        "composite_steps": "one reverse step per branch",
        "step_noise": "shared across branches",
        "eps_L": "fixed within an outer iteration",
        "background_estimate": (
            "predicted x0 of the composite at level i-1"
            if cfg.background_estimate == "composite"
            else "mask-blend of branch-wise predicted x0 at level i-1"
        ),
        "background_branch": cfg.background_branch,
        "optimizer_scope": "fresh optimizer per outer iteration",
        "round_report": "loss at the start of each round",
    }


def square_mask(m: PixelMask, margin_ratio: float) -> PixelMask:
    """Square around the foreground's bounding box, widened by margin_ratio
    of its side on every side and kept inside the frame."""
    h, w = m.data.shape
    ys, xs = torch.nonzero(m.data, as_tuple=True)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    side = max(y1 - y0, x1 - x0)
    side = math.ceil(side * (1 + 2 * margin_ratio))

    def _span(lo: int, hi: int, extent: int) -> tuple[int, int]:
        if side >= extent:
            return 0, extent
        start = round((lo + hi) / 2 - side / 2)
        start = min(max(start, 0), extent - side)
        return start, start + side

    top, bottom = _span(y0, y1, h)
    left, right = _span(x0, x1, w)
    out = torch.zeros_like(m.data)
    out[top:bottom, left:right] = 1
    return PixelMask(out)


def refine(
    fused: LatentTensor,
    m: PixelMask,
    cfg: HarmonizeConfig,
    backend: DenoiserBackend,
    codec: Codec,
    sched: NoiseSchedule,
    *,
    generator: torch.Generator | None = None,
) -> ImageTensor:
    """Prompt-only noise-and-denoise pass over a square around the foreground.

    Outside the square, every step is reset to the original fused latent
    noised to the matching level, so only the square changes.
    """
    if not cfg.refinement.enabled:
        raise ContractError("refinement is disabled in this config")
    fused.require_level(0, "refinement input")
    t_ref = cfg.refinement.resolve_t_ref(sched.T)
    if m.is_empty:
        logfire.warn("refinement skipped: the mask is empty")
        return decode(fused, codec)[0]
    if t_ref == 0:
        return decode(fused, codec)[0]

    region = resample_mask(square_mask(m, cfg.refinement.margin_ratio), codec.factor)
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    c = backend.embed_text(cfg.prompt).to(fused.data.dtype)
    with logfire.span("refine", t_ref=t_ref, area=float(region.data.mean())):
        x = forward_noise(fused, t_ref, None, sched, generator=generator)
        for s in range(t_ref, 0, -1):
            x = reverse_step(x, s, c, backend, sched, cfg.sampler, generator=generator)
            known = fused if s == 1 else forward_noise(fused, s - 1, None, sched, generator=generator)
            x = LatentTensor(_blend(known.data, x.data, region), s - 1)
    return decode(x, codec)[0]


def run_hash(hashes: dict[str, str], cfg: HarmonizeConfig, codec: Codec, backend_hash: str) -> str:
    h = hashlib.sha256()
    for key in ("background", "foreground", "mask"):
        h.update(hashes[key].encode())
    h.update(cfg.model_dump_json().encode())
    h.update(f"{type(codec).__name__}:{codec.factor}".encode())
    h.update(backend_hash.encode())
    return h.hexdigest()


def input_hashes(xG: ImageTensor, xI: ImageTensor, m: PixelMask) -> dict[str, str]:
    return {
        "background": tensor_sha256(xG.data.to(torch.float64)),
        "foreground": tensor_sha256(xI.data.to(torch.float64)),
        "mask": tensor_sha256(m.data.to(torch.float64)),
    }


def harmonize(
    xG: ImageTensor,
    xI: ImageTensor,
    m: PixelMask,
    cfg: HarmonizeConfig,
    backend: DenoiserBackend,
    codec: Codec,
) -> HarmonizeResult:
    """Blend the masked foreground of ``xI`` into ``xG``."""
    started = time.perf_counter()
    if (xG.height, xG.width) != (xI.height, xI.width):
        raise ShapeError(
            f"background {xG.height}×{xG.width} and foreground {xI.height}×{xI.width} differ"
        )
    if not m.matches(xG):
        raise ShapeError(f"mask {tuple(m.data.shape)} does not match image {xG.height}×{xG.width}")
    if backend.latent_channels != codec.latent_channels:
        raise ShapeError(
            f"backend expects {backend.latent_channels} latent channels, "
            f"codec produces {codec.latent_channels}"
        )
    _check_frozen(backend)
    dtype = getattr(torch, cfg.dtype)
    backend = _cast_backend(backend, dtype)
    sched = backend.schedule
    T = sched.T
    t_aug = cfg.resolve_t_aug(T)
    t_ref = cfg.refinement.resolve_t_ref(T)
    hashes = input_hashes(xG, xI, m)
    record = RunRecord(
        run_hash=run_hash(hashes, cfg, codec, backend.content_hash),
        package_version=__version__,
        config=cfg,
        codec=f"{type(codec).__name__}(f={codec.factor})",
        T=T,
        t_aug=t_aug,
        t_ref=t_ref,
        decisions=design_flags(cfg),
        hashes={**hashes, "backend": backend.content_hash},
    )

    g = torch.Generator().manual_seed(cfg.seed)
    xG_lat = encode(ImageTensor(xG.data.to(dtype)), codec)
    xI_lat = encode(ImageTensor(xI.data.to(dtype)), codec)
    mask = resample_mask(PixelMask(m.data.to(dtype)), codec.factor)
    region = mask if cfg.loss_region == "mask" else None
    c = backend.embed_text(cfg.prompt).to(dtype)
    content_ref = xI_lat if cfg.content_target == "foreground" else xG_lat
    x_learn = xI_lat.data.clone(memory_format=torch.contiguous_format).requires_grad_(True)

    trace: list[LossReport] = []
    finals: list[LossReport] = []
    snapshots: list[torch.Tensor] = []
    xG_clean = xG_lat
    xB_clean = xG_lat  # background-only trajectory

    with logfire.span(
        "harmonize", T=T, t_aug=t_aug, rounds=cfg.inner_rounds,
        optimizer=cfg.optimizer.kind, sampler=str(cfg.sampler), seed=cfg.seed,
    ):
        for it, i in enumerate(range(t_aug, 0, -1), start=1):
            with logfire.span("iteration {iteration} at level {level}", iteration=it, level=i):
                eps_L = standard_normal(x_learn, g)
                eps_G = standard_normal(x_learn, g)
                xG_i = forward_noise(xG_clean, i, eps_G, sched)
                target = style_target(
                    xG_i, i, c, backend, source=cfg.style_source, normalize=cfg.gram_normalize
                )
                bg_ref = xG_clean

                def evaluate(round_: int) -> tuple[torch.Tensor, LossReport]:
                    xL = LatentTensor(x_learn, 0)
                    return total_loss(
                        xL, content_ref, bg_ref,
                        forward_noise(xL, i, eps_L, sched), xG_i,
                        i, c, backend, cfg.weights,
                        source=cfg.style_source, normalize=cfg.gram_normalize,
                        target=target, mask=region, iteration=it, round=round_,
                    )

                trace.extend(_optimize(x_learn, evaluate, cfg, it, i, record.events))
                with torch.no_grad():
                    finals.append(evaluate(cfg.inner_rounds)[1])
                    xL_i = forward_noise(LatentTensor(x_learn.detach(), 0), i, eps_L, sched)
                    z = standard_normal(x_learn, g)
                    if cfg.background_branch == "isolated":
                        bg_input = forward_noise(xB_clean, i, eps_G, sched)
                    else:
                        bg_input = xG_i
                    branches = _branch_update(
                        bg_input, xL_i, mask, i, c, backend, sched, cfg.sampler, g, z
                    )
                    if i > 1:
                        if cfg.background_estimate == "composite":
                            xG_clean = LatentTensor(_project(branches.composite, c, backend, sched), 0)
                        else:
                            bg_clean = _project(branches.background, c, backend, sched)
                            fg_clean = _project(branches.foreground, c, backend, sched)
                            xG_clean = LatentTensor(_blend(bg_clean, fg_clean, mask), 0)
                        if cfg.background_branch == "isolated":
                            xB_clean = LatentTensor(_project(branches.background, c, backend, sched), 0)
                    else:
                        xG_clean = branches.composite
                check_finite(xG_clean.data, "background estimate", step=i)
                if cfg.keep_snapshots:
                    snapshots.append(xG_clean.data.clone())
                logfire.info(
                    "level {level}: total {total:.4g}, style {style:.4g}, content {content:.4g}",
                    level=i, total=finals[-1].total, style=finals[-1].style,
                    content=finals[-1].content,
                )
        optimized = time.perf_counter()

        fused_latent = xG_clean
        pre_image, clamp_fraction = decode(fused_latent, codec)
        fused_image = pre_image
        if cfg.refinement.enabled:
            fused_image = refine(fused_latent, m, cfg, backend, codec, sched, generator=g)
            record.refined = t_ref > 0 and not m.is_empty
        _check_frozen(backend)

    finished = time.perf_counter()
    record.loss_trace = trace
    record.clamp_fraction = clamp_fraction
    record.timing = {
        "optimize_seconds": optimized - started,
        "refine_seconds": finished - optimized,
        "total_seconds": finished - started,
    }
    record.hashes["fused_latent"] = tensor_sha256(fused_latent.data)
    record.hashes["fused_image"] = tensor_sha256(fused_image.data)
    return HarmonizeResult(
        fused_image=fused_image,
        fused_latent=fused_latent,
        loss_trace=trace,
        final_reports=finals,
        record=record,
        pre_refinement_image=pre_image,
        snapshots=snapshots,
    )


def _make_optimizer(x: torch.Tensor, cfg: HarmonizeConfig) -> torch.optim.Optimizer:
    opt = cfg.optimizer
    if opt.kind == "lbfgs":
        return torch.optim.LBFGS(
            [x], lr=opt.lr, max_iter=opt.max_iter, max_eval=opt.max_eval,
            history_size=opt.history_size, line_search_fn=opt.line_search,
        )
    return torch.optim.Adam([x], lr=opt.adam_lr)


def _optimize(
    x: torch.Tensor,
    evaluate,
    cfg: HarmonizeConfig,
    iteration: int,
    level: int,
    events: list[OptimizerEvent],
) -> list[LossReport]:
    """Run ``cfg.inner_rounds`` optimizer steps on ``x`` in place.

    Returns one report per round: the loss at the round's starting point.
    """
    optimizer = _make_optimizer(x, cfg)
    reports: list[LossReport] = []
    for round_ in range(1, cfg.inner_rounds + 1):
        first: list[LossReport] = []

        def closure() -> torch.Tensor:
            optimizer.zero_grad()
            total, report = evaluate(round_)
            if not torch.isfinite(total):
                raise NumericError(f"non-finite loss at level {level}", step=level)
            total.backward()
            if not first:
                first.append(report)
            return total

        before = x.detach().clone()
        try:
            optimizer.step(closure)
            failed = not bool(torch.isfinite(x).all())
        except NumericError:
            if not first:
                raise NumericError(
                    f"non-finite loss at level {level}, round {round_}",
                    step=level,
                    last_finite=LatentTensor(before, 0),
                )
            failed = True

        if failed:
            with torch.no_grad():
                x.copy_(before)
            _fallback_step(x, evaluate, round_, level)
            optimizer = _make_optimizer(x, cfg)
            events.append(
                OptimizerEvent(
                    iteration=iteration, round=round_, kind="line_search_fallback",
                    detail="optimizer step left the finite region; took one gradient step",
                )
            )
            logfire.warn("optimizer fallback at level {level}, round {round}", level=level, round=round_)
        reports.append(first[0])
    return reports


def _fallback_step(x: torch.Tensor, evaluate, round_: int, level: int) -> None:
    x.grad = None
    total, _ = evaluate(round_)
    total.backward()
    grad = x.grad
    with torch.no_grad():
        scale = grad.abs().max()
        if not torch.isfinite(scale):
            raise NumericError(
                f"non-finite gradient at level {level}", step=level,
                last_finite=LatentTensor(x.detach().clone(), 0),
            )
        if scale > 0:
            x -= FALLBACK_MAX_STEP * grad / scale
    x.grad = None


def run_record_json(record: RunRecord) -> str:
    return record.model_dump_json(indent=2)
