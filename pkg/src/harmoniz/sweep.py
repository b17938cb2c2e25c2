"""Ablation sweeps: a grid of harmonization runs over one parameter axis.

Outputs under ``spec.output_dir``:

- ``metrics.csv``: one row per run, columns ``METRIC_COLUMNS``
- ``summary.csv``: per-axis-value means over the successful runs
- ``plots/<metric>.png``: metric against axis value
- ``runs.json``: the run records; a rerun skips cells already stored there
"""
from __future__ import annotations

import csv
import itertools
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import logfire
import torch

from harmoniz.errors import HarmonizError
from harmoniz.harmonizer import harmonize, input_hashes, run_hash
from harmoniz.latent_codec import make_codec
from harmoniz.metrics import region_psnrs
from harmoniz.models import FixtureSpec, HarmonizeConfig, RunRecord, SweepSpec
from harmoniz.store import RunStore
from harmoniz.textures import harmonization_fixture
from harmoniz.toy_backend import ToyBackend, load_snapshot

LOSS_COLUMNS = ("style", "content", "histogram", "tv", "total")
METRIC_COLUMNS = (
    "axis",
    "value",
    "seed",
    "fixture",
    "status",
    "error",
    *LOSS_COLUMNS,
    "foreground_psnr",
    "background_psnr",
    "seconds",
    "run_hash",
)
SUMMARY_COLUMNS = ("value", "runs", "failed", *LOSS_COLUMNS, "foreground_psnr", "background_psnr")
PLOTTED = ("foreground_psnr", "background_psnr", "style", "total")
MIN_SUCCESS_RATE = 0.9


@dataclass(frozen=True)
class SweepCell:
    value: float | str
    seed: int
    fixture: FixtureSpec


@dataclass
class SweepOutcome:
    rows: list[dict[str, Any]]
    succeeded: int
    total: int

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.succeeded >= MIN_SUCCESS_RATE * self.total


def grid(spec: SweepSpec) -> list[SweepCell]:
    return [
        SweepCell(value, seed, fixture)
        for fixture, value, seed in itertools.product(spec.fixtures, spec.values, spec.seeds)
    ]


def cell_config(spec: SweepSpec, cell: SweepCell, T: int) -> HarmonizeConfig:
    """The base config with the swept parameter and seed substituted."""
    data = spec.base.model_dump()
    data["seed"] = cell.seed
    if spec.axis == "t_aug_ratio":
        data["t_aug"] = max(1, math.floor(float(cell.value) * T))
    elif spec.axis == "prompt":
        data["prompt"] = str(cell.value)
    else:
        data["weights"][spec.axis] = float(cell.value)
    return HarmonizeConfig.model_validate(data)


@lru_cache(maxsize=4)
def _backend(path: str) -> ToyBackend:
    return load_snapshot(Path(path))


def _init_worker() -> None:
    torch.set_num_threads(1)


def _row(spec: SweepSpec, cell: SweepCell, **fields: Any) -> dict[str, Any]:
    row: dict[str, Any] = {col: "" for col in METRIC_COLUMNS}
    row.update(axis=spec.axis, value=cell.value, seed=cell.seed, fixture=cell.fixture.name)
    row.update(fields)
    return row


def _row_from_record(spec: SweepSpec, cell: SweepCell, record: RunRecord) -> dict[str, Any]:
    return _row(
        spec, cell, status="ok", run_hash=record.run_hash,
        seconds=record.timing.get("total_seconds", ""), **record.metrics,
    )


def run_cell(snapshot: str, spec: SweepSpec, cell: SweepCell) -> tuple[dict[str, Any], RunRecord | None]:
    """Run one grid cell. Failures come back as a row with status ``failed``."""
    with logfire.span("sweep cell {value} seed {seed}", value=cell.value, seed=cell.seed):
        try:
            backend = _backend(snapshot)
            fixture = harmonization_fixture(cell.fixture)
            cfg = cell_config(spec, cell, backend.schedule.T)
            codec = make_codec(spec.codec.kind, spec.codec.factor)
            result = harmonize(fixture.background, fixture.foreground, fixture.mask, cfg, backend, codec)
        except Exception as exc:
            logfire.warn(
                "sweep run failed: {error}", error=str(exc), error_type=type(exc).__name__,
                value=cell.value, seed=cell.seed,
            )
            return _row(spec, cell, status="failed", error=f"{type(exc).__name__}: {exc}"), None

        fg_psnr, bg_psnr = region_psnrs(
            result.fused_image, fixture.background, fixture.foreground, fixture.mask
        )
        final = result.final_reports[-1]
        result.record.metrics = {
            **{col: getattr(final, col) for col in LOSS_COLUMNS},
            "foreground_psnr": fg_psnr,
            "background_psnr": bg_psnr,
        }
        return _row_from_record(spec, cell, result.record), result.record


def _expected_hash(spec: SweepSpec, cell: SweepCell, backend: ToyBackend) -> str:
    fixture = harmonization_fixture(cell.fixture)
    cfg = cell_config(spec, cell, backend.schedule.T)
    codec = make_codec(spec.codec.kind, spec.codec.factor)
    hashes = input_hashes(fixture.background, fixture.foreground, fixture.mask)
    return run_hash(hashes, cfg, codec, backend.content_hash)


def run_sweep(spec: SweepSpec, jobs: int = 1) -> SweepOutcome:
    """Run every grid cell not already in the output store, then write the
    tables and plots."""
    out = spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    store = RunStore(out / "runs.json")
    snapshot = str(spec.backend)
    backend = _backend(snapshot)
    cells = grid(spec)

    completed = store.completed()
    rows: list[dict[str, Any] | None] = [None] * len(cells)
    pending: list[int] = []
    for idx, cell in enumerate(cells):
        try:
            stored = completed.get(_expected_hash(spec, cell, backend))
        except (HarmonizError, ValueError):
            stored = None
        if stored is not None:
            rows[idx] = _row_from_record(spec, cell, stored)
        else:
            pending.append(idx)

    with logfire.span(
        "sweep over {axis}", axis=spec.axis, runs=len(cells), pending=len(pending), jobs=jobs
    ):
        if jobs <= 1 or len(pending) <= 1:
            results = [run_cell(snapshot, spec, cells[idx]) for idx in pending]
        else:
            workers = max(1, min(jobs, len(pending), os.cpu_count() or 1))
            with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as ex:
                futures = [ex.submit(run_cell, snapshot, spec, cells[idx]) for idx in pending]
                results = [f.result() for f in futures]

    for idx, (row, _) in zip(pending, results):
        rows[idx] = row
    store.add_many([record for _, record in results if record is not None])

    done = [r for r in rows if r is not None]
    write_csv(out / "metrics.csv", METRIC_COLUMNS, done)
    summary = summarize(done, spec.values)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    plot_summary(done, spec, out / "plots")
    succeeded = sum(1 for r in done if r["status"] == "ok")
    logfire.info("sweep finished: {succeeded}/{total} runs ok", succeeded=succeeded, total=len(done))
    return SweepOutcome(rows=done, succeeded=succeeded, total=len(done))


def write_csv(path: Path, fieldnames: tuple[str, ...], rows: list[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in fieldnames})


def summarize(rows: list[dict[str, Any]], values: list[float | str]) -> list[dict[str, Any]]:
    """Mean of every numeric metric per axis value, in the sweep's value order."""
    summary = []
    for value in values:
        group = [r for r in rows if r["value"] == value]
        ok = [r for r in group if r["status"] == "ok"]
        entry: dict[str, Any] = {"value": value, "runs": len(group), "failed": len(group) - len(ok)}
        for col in SUMMARY_COLUMNS[3:]:
            entry[col] = statistics.fmean(float(r[col]) for r in ok) if ok else ""
        summary.append(entry)
    return summary


def plot_summary(rows: list[dict[str, Any]], spec: SweepSpec, directory: Path) -> list[Path]:
    """Per-run points and the per-value mean for each metric in ``PLOTTED``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory.mkdir(parents=True, exist_ok=True)
    categorical = spec.axis == "prompt"
    labels = [repr(v) if categorical else v for v in spec.values]
    xs = list(range(len(spec.values))) if categorical else [float(v) for v in spec.values]
    summary = summarize(rows, spec.values)
    paths = []
    for metric in PLOTTED:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for x, value in zip(xs, spec.values):
            pts = [
                float(r[metric]) for r in rows
                if r["value"] == value and r["status"] == "ok" and math.isfinite(float(r[metric]))
            ]
            ax.scatter([x] * len(pts), pts, s=12, alpha=0.5, color="tab:blue")
        means = [(x, s[metric]) for x, s in zip(xs, summary) if s[metric] != ""]
        if means:
            ax.plot(*zip(*means), marker="o", color="tab:red", label="mean")
            ax.legend()
        if categorical:
            ax.set_xticks(xs, labels)
        ax.set_xlabel(spec.axis)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = directory / f"{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
