from __future__ import annotations

import json
import logging
import math

import pytest
import torch

from harmoniz.diffusion_core import (
    LatentTensor,
    Sampler,
    forward_noise,
    predicted_x0,
    reverse_step,
    standard_normal,
)
from harmoniz.errors import ContractError, NumericError, ParameterError, ShapeError
from harmoniz.harmonizer import (
    FALLBACK_MAX_STEP,
    _optimize,
    composite_update,
    design_flags,
    harmonize,
    input_hashes,
    refine,
    run_hash,
    run_record_json,
    square_mask,
)
from harmoniz.latent_codec import (
    IdentityCodec,
    ImageTensor,
    LatentMask,
    PixelMask,
    SpaceToDepthCodec,
    decode,
    encode,
    resample_mask,
)
from harmoniz.losses import make_report
from harmoniz.models import (
    FixtureSpec,
    HarmonizeConfig,
    LossWeights,
    OptimizerConfig,
    RefinementConfig,
    RunRecord,
)
from harmoniz.textures import harmonization_fixture

from conftest import OracleBackend, ZeroBackend


class NaNBackend(ZeroBackend):
    content_hash = "nan"

    def predict(self, x, t, c):
        return x * float("nan")


def _fast(**overrides) -> HarmonizeConfig:
    base = dict(
        inner_rounds=2,
        optimizer=OptimizerConfig(max_iter=3, max_eval=4),
        refinement=RefinementConfig(enabled=False),
        dtype="float64",
    )
    base.update(overrides)
    return HarmonizeConfig(**base)


@pytest.fixture
def fixture16():
    return harmonization_fixture(FixtureSpec(size=16, seed=2))


# ---------------------------------------------------------------------------
# Masked composite update
# ---------------------------------------------------------------------------
def _pair(seed: int = 0, level: int = 3):
    g = torch.Generator().manual_seed(seed)
    xG = LatentTensor(torch.randn(3, 8, 8, generator=g, dtype=torch.float64), level)
    xL = LatentTensor(torch.randn(3, 8, 8, generator=g, dtype=torch.float64), level)
    z = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    return xG, xL, z


@pytest.mark.parametrize(("fill", "branch"), [(0.0, "background"), (1.0, "learnable")])
def test_constant_mask_selects_one_branch(schedule, toy_backend, fill, branch):
    xG, xL, z = _pair()
    c = toy_backend.embed_text("disc")
    m = LatentMask(torch.full((8, 8), fill))
    out = composite_update(xG, xL, m, 3, c, toy_backend, schedule, z=z)
    source = xG if branch == "background" else xL
    expected = reverse_step(source, 3, c, toy_backend, schedule, z=z)
    assert torch.equal(out.data, expected.data)
    assert out.noise_level == 2


def test_identical_branches_ignore_the_mask(schedule, toy_backend):
    xG, _, z = _pair(1)
    c = toy_backend.embed_text("")
    single = reverse_step(xG, 3, c, toy_backend, schedule, z=z)
    m = LatentMask((torch.arange(64).reshape(8, 8) % 3 == 0).double())
    out = composite_update(xG, xG, m, 3, c, toy_backend, schedule, z=z)
    assert torch.equal(out.data, single.data)


def test_step_noise_is_shared_between_branches(schedule, zero_backend):
    xG, xL, _ = _pair(2)
    c = zero_backend.embed_text("")
    half = torch.zeros(8, 8)
    half[:, :4] = 1
    out = composite_update(
        xG, xL, LatentMask(half), 3, c, zero_backend, schedule,
        generator=torch.Generator().manual_seed(9),
    )
    z = standard_normal(xG.data, torch.Generator().manual_seed(9))
    bg = reverse_step(xG, 3, c, zero_backend, schedule, z=z)
    fg = reverse_step(xL, 3, c, zero_backend, schedule, z=z)
    torch.testing.assert_close(out.data[:, :, :4], fg.data[:, :, :4], rtol=0, atol=0)
    torch.testing.assert_close(out.data[:, :, 4:], bg.data[:, :, 4:], rtol=0, atol=0)


def test_composite_update_contract(schedule, zero_backend):
    xG, xL, z = _pair()
    c = zero_backend.embed_text("")
    with pytest.raises(ContractError):
        composite_update(xG, LatentTensor(xL.data, 2), LatentMask(torch.zeros(8, 8)), 3, c, zero_backend, schedule, z=z)
    with pytest.raises(ShapeError):
        composite_update(xG, xL, LatentMask(torch.zeros(4, 8)), 3, c, zero_backend, schedule, z=z)


# ---------------------------------------------------------------------------
# End-to-end loop
# ---------------------------------------------------------------------------
def test_oracle_denoiser_returns_the_background(schedule, fixture16):
    codec = IdentityCodec()
    clean = encode(fixture16.background, codec).data
    cfg = _fast(
        weights=LossWeights(omega_sty=0, omega_c=0, omega_sta=0),
        sampler=Sampler.DETERMINISTIC,
    )
    empty = PixelMask(torch.zeros(16, 16, dtype=torch.float64))
    result = harmonize(
        fixture16.background, fixture16.foreground, empty, cfg, OracleBackend(schedule, clean), codec
    )
    torch.testing.assert_close(result.fused_image.data, fixture16.background.data, rtol=0, atol=1e-9)
    assert result.record.refined is False


def test_isolated_background_is_untouched_outside_the_mask(toy_backend, fixture16):
    codec = IdentityCodec()
    cfg = _fast(background_branch="isolated", sampler=Sampler.DETERMINISTIC)
    empty = PixelMask(torch.zeros(16, 16, dtype=torch.float64))
    with_fg = harmonize(fixture16.background, fixture16.foreground, fixture16.mask, cfg, toy_backend, codec)
    without = harmonize(fixture16.background, fixture16.foreground, empty, cfg, toy_backend, codec)
    outside = ~fixture16.mask.data.bool()
    torch.testing.assert_close(
        with_fg.fused_image.data[outside], without.fused_image.data[outside], rtol=0, atol=1e-6
    )
    inside = ~outside
    assert not torch.equal(with_fg.fused_image.data[inside], without.fused_image.data[inside])


def test_trace_layout(toy_backend, fixture16):
    cfg = _fast(inner_rounds=3)
    result = harmonize(
        fixture16.background, fixture16.foreground, fixture16.mask, cfg, toy_backend, IdentityCodec()
    )
    t_aug = result.record.t_aug
    assert t_aug == math.floor(0.2 * toy_backend.schedule.T)
    assert len(result.loss_trace) == t_aug * 3
    assert len(result.final_reports) == t_aug
    # x_L starts at the foreground latent
    assert result.loss_trace[0].content == 0.0
    assert [r.level for r in result.loss_trace] == [2, 2, 2, 1, 1, 1]
    assert [r.round for r in result.loss_trace[:3]] == [1, 2, 3]
    assert all(math.isfinite(r.total) for r in result.loss_trace)
    assert result.record.loss_trace == result.loss_trace
    assert result.fused_latent.noise_level == 0


def test_runs_are_deterministic_per_seed(toy_backend, fixture16):
    args = (fixture16.background, fixture16.foreground, fixture16.mask)
    a = harmonize(*args, _fast(seed=3), toy_backend, IdentityCodec())
    b = harmonize(*args, _fast(seed=3), toy_backend, IdentityCodec())
    c = harmonize(*args, _fast(seed=4), toy_backend, IdentityCodec())
    assert a.record.hashes["fused_image"] == b.record.hashes["fused_image"]
    assert a.record.run_hash == b.record.run_hash
    assert a.record.run_id != b.record.run_id
    assert a.record.hashes["fused_image"] != c.record.hashes["fused_image"]


@pytest.mark.parametrize("sampler", [Sampler.ANCESTRAL, Sampler.DETERMINISTIC])
def test_background_estimate_is_the_projected_composite(toy_backend, fixture16, sampler):
    # zero weights leave x_L at the foreground latent
    cfg = _fast(
        weights=LossWeights(omega_sty=0, omega_c=0, omega_sta=0),
        t_aug=2, sampler=sampler, keep_snapshots=True,
    )
    codec = IdentityCodec()
    result = harmonize(
        fixture16.background, fixture16.foreground, fixture16.mask, cfg, toy_backend, codec
    )

    sched = toy_backend.schedule
    c = toy_backend.embed_text(cfg.prompt).to(torch.float64)
    xG = encode(ImageTensor(fixture16.background.data.to(torch.float64)), codec)
    xI = encode(ImageTensor(fixture16.foreground.data.to(torch.float64)), codec)
    m = resample_mask(PixelMask(fixture16.mask.data.to(torch.float64)), codec.factor)
    g = torch.Generator().manual_seed(cfg.seed)
    eps_L = standard_normal(xI.data, g)
    eps_G = standard_normal(xI.data, g)
    z = standard_normal(xI.data, g)
    comp = composite_update(
        forward_noise(xG, 2, eps_G, sched), forward_noise(xI, 2, eps_L, sched),
        m, 2, c, toy_backend, sched, sampler, z=z,
    )
    expected = predicted_x0(comp, toy_backend.predict(comp.data, 1, c), sched)
    torch.testing.assert_close(result.snapshots[0], expected.data, rtol=0, atol=1e-12)
    assert result.record.decisions["background_estimate"].startswith("predicted x0 of the composite")


def test_branchwise_estimate_is_opt_in(toy_backend, fixture16):
    args = (fixture16.background, fixture16.foreground, fixture16.mask)
    cfg = _fast(t_aug=2, keep_snapshots=True, sampler=Sampler.DETERMINISTIC)
    joint = harmonize(*args, cfg, toy_backend, IdentityCodec())
    split = harmonize(
        *args, cfg.model_copy(update={"background_estimate": "branchwise"}), toy_backend, IdentityCodec()
    )
    assert HarmonizeConfig().background_estimate == "composite"
    assert split.record.decisions["background_estimate"].startswith("mask-blend")
    assert joint.record.run_hash != split.record.run_hash
    assert not torch.equal(joint.snapshots[0], split.snapshots[0])


def test_runtime_grows_linearly_with_t_aug(toy_backend, fixture16):
    args = (fixture16.background, fixture16.foreground, fixture16.mask)

    def seconds(t_aug: int) -> float:
        # Adam evaluates the loss once per round, so every level costs the same
        cfg = _fast(t_aug=t_aug, inner_rounds=3, optimizer=OptimizerConfig(kind="adam"))
        return min(
            harmonize(*args, cfg, toy_backend, IdentityCodec()).record.timing["optimize_seconds"]
            for _ in range(3)
        )

    seconds(1)  # warm-up
    ratio = seconds(4) / seconds(1)
    assert 2.0 <= ratio <= 8.0


def test_adam_and_refinement(toy_backend, fixture16):
    cfg = _fast(
        optimizer=OptimizerConfig(kind="adam"),
        refinement=RefinementConfig(enabled=True, t_ref=2),
        keep_snapshots=True,
    )
    result = harmonize(
        fixture16.background, fixture16.foreground, fixture16.mask, cfg, toy_backend, IdentityCodec()
    )
    assert result.record.refined is True
    assert result.record.t_ref == 2
    assert len(result.snapshots) == result.record.t_aug
    assert all(math.isfinite(r.total) for r in result.loss_trace)
    assert not torch.equal(result.fused_image.data, result.pre_refinement_image.data)


def test_non_finite_denoiser_reports_last_finite_latent(schedule, fixture16):
    with pytest.raises(NumericError) as info:
        harmonize(
            fixture16.background, fixture16.foreground, fixture16.mask,
            _fast(), NaNBackend(schedule), IdentityCodec(),
        )
    assert isinstance(info.value.last_finite, LatentTensor)
    assert bool(torch.isfinite(info.value.last_finite.data).all())


def test_shape_mismatches(toy_backend, fixture16):
    cfg = _fast()
    wide = ImageTensor(torch.zeros(16, 20, 3, dtype=torch.float64))
    with pytest.raises(ShapeError):
        harmonize(fixture16.background, wide, fixture16.mask, cfg, toy_backend, IdentityCodec())
    with pytest.raises(ShapeError):
        harmonize(
            fixture16.background, fixture16.foreground,
            PixelMask(torch.zeros(8, 8)), cfg, toy_backend, IdentityCodec(),
        )
    with pytest.raises(ShapeError):
        harmonize(
            fixture16.background, fixture16.foreground, fixture16.mask, cfg, toy_backend,
            SpaceToDepthCodec(2),
        )


def test_t_aug_range_and_guidance(toy_backend, fixture16, caplog):
    args = (fixture16.background, fixture16.foreground, fixture16.mask)
    with pytest.raises(ParameterError):
        harmonize(*args, _fast(t_aug=11), toy_backend, IdentityCodec())
    with caplog.at_level(logging.WARNING):
        result = harmonize(*args, _fast(t_aug=3, inner_rounds=1), toy_backend, IdentityCodec())
    assert result.record.t_aug == 3
    assert "exceeds" in caplog.text


def test_modified_backend_is_rejected(toy_backend, fixture16):
    with torch.no_grad():
        next(toy_backend.model.parameters()).mul_(2.0)
    with pytest.raises(ContractError):
        harmonize(
            fixture16.background, fixture16.foreground, fixture16.mask,
            _fast(), toy_backend, IdentityCodec(),
        )


def test_record_round_trips_through_json(toy_backend, fixture16):
    result = harmonize(
        fixture16.background, fixture16.foreground, fixture16.mask, _fast(), toy_backend, IdentityCodec()
    )
    result.record.metrics = {"foreground_psnr": float("inf")}
    text = run_record_json(result.record)
    back = RunRecord.model_validate(json.loads(text))
    assert back.run_hash == result.record.run_hash
    assert back.metrics["foreground_psnr"] == float("inf")
    assert back.decisions == design_flags(result.record.config)
    assert back.codec == "IdentityCodec(f=1)"


def test_run_hash_tracks_config(fixture16):
    hashes = input_hashes(fixture16.background, fixture16.foreground, fixture16.mask)
    a = run_hash(hashes, _fast(seed=0), IdentityCodec(), "abc")
    assert a == run_hash(hashes, _fast(seed=0), IdentityCodec(), "abc")
    assert a != run_hash(hashes, _fast(seed=1), IdentityCodec(), "abc")
    assert a != run_hash(hashes, _fast(seed=0), SpaceToDepthCodec(2), "abc")
    assert a != run_hash(hashes, _fast(seed=0), IdentityCodec(), "abd")


# ---------------------------------------------------------------------------
# Optimizer fallback
# ---------------------------------------------------------------------------
def _runaway(x: torch.Tensor):
    """Concave objective that turns NaN once |x| > 2."""

    def evaluate(round_: int):
        total = -(x**2).sum()
        if bool((x.abs() > 2).any()):
            total = total * float("nan")
        return total, make_report(float(total), 0.0, 0.0, 0.0, LossWeights(), round=round_)

    return evaluate


def test_line_search_failure_falls_back_to_a_gradient_step():
    x = torch.tensor([[[1.5]]], dtype=torch.float64, requires_grad=True)
    events = []
    reports = _optimize(x, _runaway(x), HarmonizeConfig(inner_rounds=2), 1, 4, events)
    assert len(reports) == 2
    assert [e.kind for e in events] == ["line_search_fallback"] * 2
    assert float(x) == pytest.approx(1.5 + 2 * FALLBACK_MAX_STEP, abs=1e-12)


def test_non_finite_start_raises():
    x = torch.tensor([[[3.0]]], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericError) as info:
        _optimize(x, _runaway(x), HarmonizeConfig(inner_rounds=1), 1, 4, [])
    assert info.value.step == 4
    assert float(info.value.last_finite.data) == 3.0


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------
def _block_mask(size: int, rows: slice, cols: slice) -> PixelMask:
    m = torch.zeros(size, size, dtype=torch.float64)
    m[rows, cols] = 1
    return PixelMask(m)


def test_square_mask_centres_and_widens():
    sq = square_mask(_block_mask(10, slice(4, 6), slice(4, 6)), 0.5).data
    expected = torch.zeros(10, 10, dtype=torch.float64)
    expected[3:7, 3:7] = 1
    assert torch.equal(sq, expected)


def test_square_mask_stays_in_frame():
    sq = square_mask(_block_mask(10, slice(0, 2), slice(0, 2)), 0.5).data
    assert torch.equal(sq.nonzero().amin(0), torch.tensor([0, 0]))
    assert int(sq.sum()) == 16
    full = square_mask(_block_mask(10, slice(4, 6), slice(4, 6)), 10.0).data
    assert bool((full == 1).all())


def test_square_mask_of_a_rectangle():
    sq = square_mask(_block_mask(8, slice(2, 4), slice(1, 7)), 0.0).data
    expected = torch.zeros(8, 8, dtype=torch.float64)
    expected[0:6, 1:7] = 1
    assert torch.equal(sq, expected)


def test_refine_without_steps_is_a_plain_decode(toy_backend, fixture16):
    codec = IdentityCodec()
    fused = encode(fixture16.background, codec)
    plain = decode(fused, codec)[0].data
    cfg = HarmonizeConfig(refinement=RefinementConfig(t_ref=0), dtype="float64")
    out = refine(fused, fixture16.mask, cfg, toy_backend, codec, toy_backend.schedule)
    assert torch.equal(out.data, plain)
    empty = PixelMask(torch.zeros(16, 16, dtype=torch.float64))
    cfg = HarmonizeConfig(refinement=RefinementConfig(t_ref=3))
    out = refine(fused, empty, cfg, toy_backend, codec, toy_backend.schedule)
    assert torch.equal(out.data, plain)


def test_refine_only_changes_the_square(toy_backend):
    codec = IdentityCodec()
    fused = LatentTensor(torch.rand(3, 16, 16, dtype=torch.float64) * 2 - 1)
    m = _block_mask(16, slice(6, 10), slice(6, 10))
    cfg = HarmonizeConfig(refinement=RefinementConfig(t_ref=3, margin_ratio=0.25), prompt="disc")
    out = refine(fused, m, cfg, toy_backend, codec, toy_backend.schedule).data
    plain = decode(fused, codec)[0].data
    square = square_mask(m, 0.25).data.bool()
    assert torch.equal(out[~square], plain[~square])
    assert not torch.equal(out[square], plain[square])


def test_refine_when_disabled(zero_backend, schedule):
    cfg = HarmonizeConfig(refinement=RefinementConfig(enabled=False))
    with pytest.raises(ContractError):
        refine(
            LatentTensor(torch.zeros(3, 4, 4)), _block_mask(4, slice(1, 2), slice(1, 2)),
            cfg, zero_backend, IdentityCodec(), schedule,
        )
