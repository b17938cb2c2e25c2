"""harmoniz trend and efficacy evaluation suite.

Every case runs full harmonizations with a trained toy backend, so a
snapshot must exist first (``harmoniz train-toy``) and ``HARMONIZ_SNAPSHOT``
must point at it.

Experiments:
  1. Efficacy - default weights halve the style term on the pinned fixture
  2. Noise-level ablation - foreground PSNR falls as t_aug/T grows
  3. Content-weight ablation - a heavy content weight keeps the foreground
     but loses on style
  4. Prompt ablation - the style token beats the empty prompt
  5. Optimizer - L-BFGS ends at a lower total loss than Adam
  6. Toy training - the loss halves and conditioning matters
"""
from __future__ import annotations

import os
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
load_dotenv(os.path.join(os.path.dirname(__file__), "..", ".env"))

import logfire
logfire.configure(
    service_name="harmoniz-evals",
    environment=os.environ.get("HARMONIZ_ENVIRONMENT", "development"),
    send_to_logfire="if-token-present",
)

from pydantic import BaseModel, Field
from pydantic_evals import Case, Dataset
from pydantic_evals.evaluators import (
    EvaluationReason,
    Evaluator,
    EvaluatorContext,
    MaxDuration,
)

from harmoniz.harmonizer import harmonize
from harmoniz.latent_codec import IdentityCodec
from harmoniz.metrics import region_psnrs
from harmoniz.models import FixtureSpec, HarmonizeConfig, LossWeights, OptimizerConfig
from harmoniz.textures import TextureDataset, harmonization_fixture
from harmoniz.toy_backend import ToyBackend, conditioning_gap, load_snapshot

SEEDS = [0, 1, 2, 3, 4]

_backend: ToyBackend | None = None


def _get_backend() -> ToyBackend:
    global _backend
    if _backend is None:
        _backend = load_snapshot(Path(os.environ["HARMONIZ_SNAPSHOT"]))
    return _backend


def check_prerequisites() -> None:
    """Verify a trained toy snapshot is available before running evals."""
    path = os.environ.get("HARMONIZ_SNAPSHOT")
    if not path:
        raise RuntimeError(
            "HARMONIZ_SNAPSHOT is not set. Train a backend first "
            "(harmoniz train-toy --config <path>) and point the variable at the .pt file."
        )
    if not Path(path).is_file():
        raise RuntimeError(f"HARMONIZ_SNAPSHOT={path} does not exist")


# ---------------------------------------------------------------------------
# Task
# ---------------------------------------------------------------------------
class ExperimentInput(BaseModel):
    kind: Literal["efficacy", "t_aug_ratio", "content_weight", "prompt", "optimizer", "training"]
    seeds: list[int] = Field(default_factory=lambda: list(SEEDS))
    values: list[float | str] = Field(default_factory=list)
    fixture: FixtureSpec = Field(default_factory=FixtureSpec)


class ExperimentOutput(BaseModel):
    series: dict[str, list[float]] = Field(
        description="One list of per-seed measurements per experiment arm."
    )


def _run(cfg: HarmonizeConfig, fixture_spec: FixtureSpec):
    fixture = harmonization_fixture(fixture_spec)
    result = harmonize(
        fixture.background, fixture.foreground, fixture.mask, cfg, _get_backend(), IdentityCodec()
    )
    fg_psnr, _ = region_psnrs(result.fused_image, fixture.background, fixture.foreground, fixture.mask)
    return result, fg_psnr


def _efficacy(inp: ExperimentInput) -> dict[str, list[float]]:
    ratios = []
    for seed in inp.seeds:
        result, _ = _run(HarmonizeConfig(seed=seed), inp.fixture)
        ratios.append(result.final_reports[-1].style / result.loss_trace[0].style)
    return {"style_ratio": ratios}


def _t_aug_ratio(inp: ExperimentInput) -> dict[str, list[float]]:
    T = _get_backend().schedule.T
    series = {}
    for value in inp.values:
        t_aug = max(1, int(float(value) * T))
        series[str(value)] = [
            _run(HarmonizeConfig(seed=seed, t_aug=t_aug), inp.fixture)[1] for seed in inp.seeds
        ]
    return series


def _content_weight(inp: ExperimentInput) -> dict[str, list[float]]:
    heavy = LossWeights(omega_c=float(inp.values[0]))
    series: dict[str, list[float]] = {"default_psnr": [], "heavy_psnr": [], "default_style": [], "heavy_style": []}
    for seed in inp.seeds:
        for arm, weights in (("default", LossWeights()), ("heavy", heavy)):
            result, psnr = _run(HarmonizeConfig(seed=seed, weights=weights), inp.fixture)
            series[f"{arm}_psnr"].append(psnr)
            series[f"{arm}_style"].append(result.final_reports[-1].style)
    return series


def _prompt(inp: ExperimentInput) -> dict[str, list[float]]:
    return {
        repr(prompt): [
            _run(HarmonizeConfig(seed=seed, prompt=str(prompt)), inp.fixture)[1] for seed in inp.seeds
        ]
        for prompt in inp.values
    }


def _optimizer(inp: ExperimentInput) -> dict[str, list[float]]:
    series: dict[str, list[float]] = {"lbfgs": [], "adam": []}
    for seed in inp.seeds:
        for kind in ("lbfgs", "adam"):
            cfg = HarmonizeConfig(seed=seed, optimizer=OptimizerConfig(kind=kind))
            result, _ = _run(cfg, inp.fixture)
            series[kind].append(result.final_reports[-1].total)
    return series


def _training(inp: ExperimentInput) -> dict[str, list[float]]:
    backend = _get_backend()
    if backend.meta is None:
        raise RuntimeError("snapshot carries no training metadata")
    trace = backend.meta.loss_trace
    dataset = TextureDataset(backend.meta.dataset)
    matched, mismatched = zip(*(conditioning_gap(backend, dataset, seed) for seed in inp.seeds))
    return {
        "loss_ratio": [trace[-1] / trace[0]],
        "matched": list(matched),
        "mismatched": list(mismatched),
    }


EXPERIMENTS = {
    "efficacy": _efficacy,
    "t_aug_ratio": _t_aug_ratio,
    "content_weight": _content_weight,
    "prompt": _prompt,
    "optimizer": _optimizer,
    "training": _training,
}


async def run_experiment(inp: ExperimentInput) -> ExperimentOutput:
    """Task function: runs one experiment arm-by-arm over the seeds."""
    with logfire.span("experiment {kind}", kind=inp.kind, seeds=len(inp.seeds)):
        return ExperimentOutput(series=EXPERIMENTS[inp.kind](inp))


# ---------------------------------------------------------------------------
# Evaluators
# ---------------------------------------------------------------------------
@dataclass
class AllBelow(Evaluator):
    """At least ``min_passing`` measurements of ``series`` are below ``threshold``."""

    series: str
    threshold: float
    min_passing: int = 1

    def evaluate(self, ctx: EvaluatorContext) -> EvaluationReason:
        values = ctx.output.series[self.series]
        passing = sum(v < self.threshold for v in values)
        return EvaluationReason(
            value=passing >= self.min_passing,
            reason=f"{passing}/{len(values)} below {self.threshold}: {[round(v, 4) for v in values]}",
        )


@dataclass
class NonIncreasingMeans(Evaluator):
    """Per-arm means never rise along ``order``."""

    order: list[str]

    def evaluate(self, ctx: EvaluatorContext) -> EvaluationReason:
        means = [statistics.fmean(ctx.output.series[key]) for key in self.order]
        ok = all(a >= b for a, b in zip(means, means[1:]))
        return EvaluationReason(
            value=ok,
            reason=", ".join(f"{k}: {m:.3f}" for k, m in zip(self.order, means)),
        )


@dataclass
class MeanAtLeast(Evaluator):
    """mean(``higher``) >= mean(``lower``)."""

    higher: str
    lower: str

    def evaluate(self, ctx: EvaluatorContext) -> EvaluationReason:
        hi = statistics.fmean(ctx.output.series[self.higher])
        lo = statistics.fmean(ctx.output.series[self.lower])
        return EvaluationReason(
            value=hi >= lo,
            reason=f"{self.higher}: {hi:.4g} vs {self.lower}: {lo:.4g}",
        )


@dataclass
class PairwiseNoWorse(Evaluator):
    """``better[k] <= worse[k]`` for at least ``min_wins`` seeds."""

    better: str
    worse: str
    min_wins: int

    def evaluate(self, ctx: EvaluatorContext) -> EvaluationReason:
        a = ctx.output.series[self.better]
        b = ctx.output.series[self.worse]
        wins = sum(x <= y for x, y in zip(a, b))
        return EvaluationReason(
            value=wins >= self.min_wins,
            reason=f"{self.better} <= {self.worse} in {wins}/{len(a)} seeds",
        )


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------
cases = [
    Case(
        name="default_weights_halve_style",
        inputs=ExperimentInput(kind="efficacy"),
        evaluators=[
            AllBelow(series="style_ratio", threshold=0.5, min_passing=len(SEEDS)),
            MaxDuration(seconds=600),
        ],
    ),
    Case(
        name="foreground_degrades_with_noise_level",
        inputs=ExperimentInput(kind="t_aug_ratio", values=[0.1, 0.3, 0.5]),
        evaluators=[NonIncreasingMeans(order=["0.1", "0.3", "0.5"])],
    ),
    Case(
        name="heavy_content_weight_keeps_foreground",
        inputs=ExperimentInput(kind="content_weight", values=[1e12]),
        evaluators=[
            MeanAtLeast(higher="heavy_psnr", lower="default_psnr"),
            MeanAtLeast(higher="heavy_style", lower="default_style"),
        ],
    ),
    Case(
        name="style_token_prompt_helps",
        inputs=ExperimentInput(kind="prompt", values=["", "stripes"]),
        evaluators=[MeanAtLeast(higher="'stripes'", lower="''"), MaxDuration(seconds=600)],
    ),
    Case(
        name="lbfgs_beats_adam",
        inputs=ExperimentInput(kind="optimizer"),
        evaluators=[PairwiseNoWorse(better="lbfgs", worse="adam", min_wins=4), MaxDuration(seconds=600)],
    ),
    Case(
        name="toy_training_oracle",
        inputs=ExperimentInput(kind="training", seeds=[0]),
        evaluators=[
            AllBelow(series="loss_ratio", threshold=0.5),
            PairwiseNoWorse(better="matched", worse="mismatched", min_wins=1),
        ],
    ),
]

dataset = Dataset(cases=cases)


if __name__ == "__main__":
    check_prerequisites()
    report = dataset.evaluate_sync(run_experiment)
    report.print(include_input=True, include_output=True)
