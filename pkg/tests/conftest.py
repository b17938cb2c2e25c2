from __future__ import annotations

import math
from pathlib import Path

import logfire
import pytest
import torch

from harmoniz.diffusion_core import NoiseSchedule, TextEmbedding, make_schedule
from harmoniz.models import DatasetSpec, ScheduleConfig, ToyArchitecture, TrainConfig
from harmoniz.textures import TextureDataset
from harmoniz.toy_backend import StubTextEncoder, ToyBackend, ToyDenoiser, save_snapshot, train_toy

logfire.configure(send_to_logfire=False, console=False)


class ZeroBackend:
    """eps ≡ 0 everywhere. Keeps the autograd graph so losses stay differentiable."""

    latent_channels = 3
    embed_dim = 4
    content_hash = "zero"

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        self._text = StubTextEncoder(self.embed_dim)

    def predict(self, x: torch.Tensor, t: int, c: TextEmbedding) -> torch.Tensor:
        return x * 0.0

    def features(self, x: torch.Tensor, t: int, c: TextEmbedding) -> list[torch.Tensor]:
        return [self.predict(x, t, c)]

    def embed_text(self, prompt: str) -> TextEmbedding:
        return self._text(prompt)


class OracleBackend(ZeroBackend):
    """Predicts exactly the noise separating its input from a known clean latent."""

    content_hash = "oracle"

    def __init__(self, schedule: NoiseSchedule, clean: torch.Tensor):
        super().__init__(schedule)
        self.clean = clean

    def predict(self, x: torch.Tensor, t: int, c: TextEmbedding) -> torch.Tensor:
        abar = self.schedule.alpha_bar(t)
        return (x - math.sqrt(abar) * self.clean.to(x.dtype)) / math.sqrt(1.0 - abar)


class ScaleBackend(ZeroBackend):
    """eps = k·x, a smooth per-pixel denoiser."""

    content_hash = "scale"

    def __init__(self, schedule: NoiseSchedule, k: float = 0.5):
        super().__init__(schedule)
        self.k = k

    def predict(self, x: torch.Tensor, t: int, c: TextEmbedding) -> torch.Tensor:
        return self.k * x


@pytest.fixture
def schedule() -> NoiseSchedule:
    return make_schedule(10, 1e-4, 0.02)


@pytest.fixture
def tiny_arch() -> ToyArchitecture:
    return ToyArchitecture(base_width=8, embed_dim=8, attn_dim=8)


@pytest.fixture
def toy_backend(schedule: NoiseSchedule, tiny_arch: ToyArchitecture) -> ToyBackend:
    """Untrained float64 toy network on a 10-step schedule."""
    with torch.random.fork_rng():
        torch.manual_seed(0)
        model = ToyDenoiser(tiny_arch).to(torch.float64)
    return ToyBackend(model, schedule)


@pytest.fixture
def zero_backend(schedule: NoiseSchedule) -> ZeroBackend:
    return ZeroBackend(schedule)


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


def dyadic_image(h: int, w: int, seed: int = 0) -> torch.Tensor:
    """H×W×3 image on the k/256 grid, so identity encode/decode is exact."""
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 257, (h, w, 3), generator=g).to(torch.float64) / 256.0


@pytest.fixture(scope="session")
def snapshot_path(tmp_path_factory) -> Path:
    """A one-epoch toy snapshot on a 10-step schedule, trained once per session."""
    cfg = TrainConfig(
        dataset=DatasetSpec(size=8, num_samples=16, seed=0),
        schedule=ScheduleConfig(T=10),
        architecture=ToyArchitecture(base_width=8, embed_dim=8, attn_dim=8),
        epochs=1,
        batch_size=8,
    )
    result = train_toy(TextureDataset(cfg.dataset), cfg.schedule.build(), cfg)
    return save_snapshot(result.backend, tmp_path_factory.mktemp("snapshots"))
