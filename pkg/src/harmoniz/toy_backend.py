"""A small text-conditioned denoiser that makes the whole pipeline runnable
without external weights.

The network is a three-resolution convolutional encoder-decoder with one
cross-attention block at the bottleneck. ``ToyBackend`` wraps a trained,
frozen network and satisfies the ``DenoiserBackend`` contract.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import logfire
import torch
import torch.nn.functional as F
from torch import nn

from harmoniz.diffusion_core import NoiseSchedule, TextEmbedding
from harmoniz.errors import ContractError, ShapeError, TrainingError
from harmoniz.models import ScheduleConfig, SnapshotMeta, ToyArchitecture, TrainConfig
from harmoniz.textures import TextureDataset

NULL_TOKEN = "<|null|>"


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------
class StubTextEncoder:
    """Whitespace tokens mapped to seeded Gaussian vectors.

    Each token's vector is drawn from a generator seeded with a hash of
    (seed, token), so it never depends on which other tokens were seen.
    """

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, torch.Tensor] = {}

    def embed_token(self, token: str) -> torch.Tensor:
        if token not in self._cache:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
            self._cache[token] = torch.randn(self.dim, generator=g, dtype=torch.float64)
        return self._cache[token]

    def tokenize(self, prompt: str) -> list[str]:
        return prompt.lower().split() or [NULL_TOKEN]

    def __call__(self, prompt: str) -> TextEmbedding:
        return TextEmbedding(torch.stack([self.embed_token(tok) for tok in self.tokenize(prompt)]))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------
def cross_attention(
    e_img: torch.Tensor,
    e_txt: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> torch.Tensor:
    """Softmax((W_Q E_img)(W_K E_txt)^T / sqrt(d)) W_V E_txt on a spatial grid.

    e_img: (B, C, h, w) or (C, h, w); e_txt: (B, L, d) or (L, d).
    w_q: (d_k, C), w_k: (d_k, d), w_v: (d_v, d). Returns (B, d_v, h, w)
    (unbatched if e_img was).
    """
    unbatched = e_img.ndim == 3
    if unbatched:
        e_img = e_img.unsqueeze(0)
    b, ch, h, w = e_img.shape
    if e_txt.ndim == 2:
        e_txt = e_txt.unsqueeze(0).expand(b, -1, -1)
    d_k = w_q.shape[0]
    if w_q.shape[1] != ch or w_k.shape != (d_k, e_txt.shape[-1]) or w_v.shape[1] != e_txt.shape[-1]:
        raise ShapeError(
            f"projection shapes W_Q {tuple(w_q.shape)}, W_K {tuple(w_k.shape)}, "
            f"W_V {tuple(w_v.shape)} do not fit image channels {ch} and text dim {e_txt.shape[-1]}"
        )

    x = e_img.reshape(b, ch, h * w).transpose(1, 2)  # (B, hw, C)
    q = x @ w_q.T
    k = e_txt @ w_k.T
    v = e_txt @ w_v.T
    attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d_k), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, -1, h, w)
    return out.squeeze(0) if unbatched else out


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Residual cross-attention from image features to text tokens."""

    def __init__(self, channels: int, text_dim: int, attn_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.w_q = nn.Parameter(torch.randn(attn_dim, channels) / math.sqrt(channels))
        self.w_k = nn.Parameter(torch.randn(attn_dim, text_dim) / math.sqrt(text_dim))
        self.w_v = nn.Parameter(torch.randn(channels, text_dim) / math.sqrt(text_dim))

    def forward(self, x: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
        return x + cross_attention(self.norm(x), txt, self.w_q, self.w_k, self.w_v)


class ToyDenoiser(nn.Module):
    """eps-prediction network over c×h×w latents (h, w divisible by 4)."""

    def __init__(self, arch: ToyArchitecture):
        super().__init__()
        self.arch = arch
        w = arch.base_width
        temb = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(arch.in_channels, w, 3, padding=1)
        self.down0 = ResBlock(w, w, temb)
        self.pool0 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down1 = ResBlock(w, 2 * w, temb)
        self.pool1 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * w, 4 * w, temb)
        self.attn = CrossAttentionBlock(4 * w, arch.embed_dim, arch.attn_dim)
        self.mid2 = ResBlock(4 * w, 4 * w, temb)
        self.up1 = ResBlock(4 * w + 2 * w, 2 * w, temb)
        self.up0 = ResBlock(2 * w + w, w, temb)
        self.norm_out = nn.GroupNorm(_groups(w), w)
        self.conv_out = nn.Conv2d(w, arch.in_channels, 3, padding=1)

    def run(
        self, x: torch.Tensor, t: torch.Tensor, txt: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns the noise prediction and [bottleneck, up1, up0, output] maps."""
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.arch.base_width))
        h0 = self.down0(self.conv_in(x), temb)
        h1 = self.down1(self.pool0(h0), temb)
        mid = self.mid1(self.pool1(h1), temb)
        mid = self.attn(mid, txt)
        bottleneck = mid
        mid = self.mid2(mid, temb)
        u1 = self.up1(torch.cat([F.interpolate(mid, scale_factor=2.0, mode="nearest"), h1], 1), temb)
        u0 = self.up0(torch.cat([F.interpolate(u1, scale_factor=2.0, mode="nearest"), h0], 1), temb)
        out = self.conv_out(F.silu(self.norm_out(u0)))
        return out, [bottleneck, u1, u0, out]

    def forward(self, x: torch.Tensor, t: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
        return self.run(x, t, txt)[0]


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over parameter names, dtypes, shapes and bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(f"{name}:{t.dtype}:{tuple(t.shape)}".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Frozen backend
# ---------------------------------------------------------------------------
class ToyBackend:
    """Frozen ToyDenoiser + schedule + text encoder."""

    def __init__(
        self,
        model: ToyDenoiser,
        schedule: NoiseSchedule,
        meta: SnapshotMeta | None = None,
        content_hash: str | None = None,
    ):
        model.eval()
        model.requires_grad_(False)
        self.model = model
        self.schedule = schedule
        self.meta = meta
        arch = model.arch
        self.text_encoder = StubTextEncoder(arch.embed_dim, arch.text_seed)
        self.latent_channels = arch.in_channels
        self.embed_dim = arch.embed_dim
        self.dtype = next(model.parameters()).dtype
        self._frozen_hash = parameter_hash(model)
        self.content_hash = content_hash or self._frozen_hash

    def to(self, dtype: torch.dtype) -> ToyBackend:
        if dtype == self.dtype:
            return self
        return ToyBackend(
            copy.deepcopy(self.model).to(dtype), self.schedule, self.meta, self.content_hash
        )

    def check_frozen(self) -> None:
        if any(p.requires_grad for p in self.model.parameters()) or (
            parameter_hash(self.model) != self._frozen_hash
        ):
            raise ContractError("frozen backend parameters were modified")

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 3 or x.shape[0] != self.latent_channels:
            raise ShapeError(
                f"backend expects a {self.latent_channels}×h×w latent, got {tuple(x.shape)}"
            )
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ShapeError(
                f"latent size {x.shape[1]}×{x.shape[2]} must be divisible by 4",
                hint="use a larger image or a smaller codec factor",
            )

    def _run(self, x: torch.Tensor, t: int, c: TextEmbedding) -> list[torch.Tensor]:
        self._check_input(x)
        self.schedule.check_step(t)
        steps = torch.full((1,), float(t), dtype=self.dtype)
        _, maps = self.model.run(x.to(self.dtype).unsqueeze(0), steps, c.tokens.to(self.dtype))
        return [m.squeeze(0).to(x.dtype) for m in maps]

    def predict(self, x: torch.Tensor, t: int, c: TextEmbedding) -> torch.Tensor:
        return self._run(x, t, c)[-1]

    def features(self, x: torch.Tensor, t: int, c: TextEmbedding) -> list[torch.Tensor]:
        """[post-attention bottleneck, decoder maps..., final output]."""
        return self._run(x, t, c)

    def embed_text(self, prompt: str) -> TextEmbedding:
        return self.text_encoder(prompt)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    backend: ToyBackend
    loss_trace: list[float] = field(default_factory=list)
    val_trace: list[float] = field(default_factory=list)  # index 0: before training


def dataset_latents(dataset: TextureDataset) -> torch.Tensor:
    """Identity-codec latents (N, 3, H, W) in [-1, 1]."""
    return dataset.images.permute(0, 3, 1, 2) * 2.0 - 1.0


def _prompt_bank(
    dataset: TextureDataset, encoder: StubTextEncoder
) -> dict[str, torch.Tensor]:
    """Per-sample embeddings for every prompt variant, stacked (N, L, d)."""
    variants = {
        "full": [dataset.prompt(i) for i in range(len(dataset))],
        "shape": list(dataset.shapes),
        "style": list(dataset.styles),
        "null": [""] * len(dataset),
    }
    return {
        name: torch.stack([encoder(p).tokens for p in prompts]).to(torch.float32)
        for name, prompts in variants.items()
    }


def _noised_batch(
    x0: torch.Tensor, sched: NoiseSchedule, g: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    abar = sched.alpha_bars[t - 1].to(x0.dtype)[:, None, None, None]
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps, t, eps


@torch.no_grad()
def eps_mse(
    model: ToyDenoiser,
    x0: torch.Tensor,
    txt: torch.Tensor,
    sched: NoiseSchedule,
    seed: int,
    batch_size: int = 128,
) -> float:
    """Mean eps-prediction error with noise and steps fixed by ``seed``."""
    g = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for start in range(0, x0.shape[0], batch_size):
        xb = x0[start : start + batch_size]
        xt, t, eps = _noised_batch(xb, sched, g)
        pred = model(xt, t, txt[start : start + batch_size])
        total += float(((pred - eps) ** 2).sum())
        count += eps.numel()
    return total / max(count, 1)


def train_toy(dataset: TextureDataset, sched: NoiseSchedule, cfg: TrainConfig) -> TrainResult:
    """Fit the eps-prediction objective; deterministic given ``cfg.seed``."""
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if cfg.architecture.in_channels != 3:
        raise ShapeError("toy training runs on identity-codec latents (in_channels = 3)")
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = ToyDenoiser(cfg.architecture)
    encoder = StubTextEncoder(cfg.architecture.embed_dim, cfg.architecture.text_seed)
    x0_all = dataset_latents(dataset)
    bank = _prompt_bank(dataset, encoder)
    train_idx, val_idx = dataset.split()
    if not val_idx:
        val_idx = train_idx
    train_idx_t = torch.tensor(train_idx)
    x0_val = x0_all[val_idx]
    txt_val = bank["full"][val_idx]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    val_seed = cfg.seed + 1
    loss_trace: list[float] = []
    val_trace = [eps_mse(model, x0_val, txt_val, sched, val_seed)]
    last_finite = copy.deepcopy(model.state_dict())
    variants = ("full", "shape", "style")

    with logfire.span("train_toy", epochs=cfg.epochs, samples=len(train_idx), T=sched.T):
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            perm = train_idx_t[torch.randperm(len(train_idx), generator=g)]
            batch_losses: list[float] = []
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                if float(torch.rand((), generator=g)) < cfg.prompt_dropout:
                    variant = "null"
                else:
                    variant = variants[int(torch.randint(len(variants), (), generator=g))]
                xt, t, eps = _noised_batch(x0_all[idx], sched, g)
                loss = F.mse_loss(model(xt, t, bank[variant][idx]), eps)
                opt.zero_grad()
                loss.backward()
                opt.step()
                batch_losses.append(loss.detach().item())

            epoch_loss = sum(batch_losses) / len(batch_losses)
            if not math.isfinite(epoch_loss):
                logfire.error("toy training diverged", epoch=epoch)
                raise TrainingError(
                    f"training loss became non-finite at epoch {epoch}",
                    epoch=epoch,
                    last_finite=last_finite,
                    loss_trace=loss_trace,
                )
            loss_trace.append(epoch_loss)
            last_finite = copy.deepcopy(model.state_dict())
            model.eval()
            val_trace.append(eps_mse(model, x0_val, txt_val, sched, val_seed))
            logfire.info(
                "epoch {epoch}: train {train_loss:.4f}, val {val_loss:.4f}",
                epoch=epoch, train_loss=epoch_loss, val_loss=val_trace[-1],
            )

    meta = SnapshotMeta(
        content_hash=parameter_hash(model),
        architecture=model.arch,
        schedule=ScheduleConfig(
            T=sched.T, beta_start=float(sched.betas[0]), beta_end=float(sched.betas[-1])
        ),
        dataset=dataset.spec,
        epochs=cfg.epochs,
        loss_trace=loss_trace,
    )
    return TrainResult(ToyBackend(model, sched, meta), loss_trace, val_trace)


@torch.no_grad()
def conditioning_gap(backend: ToyBackend, dataset: TextureDataset, seed: int = 0) -> tuple[float, float]:
    """Validation eps-MSE with the correct style token vs. a mismatched one."""
    _, val_idx = dataset.split()
    styles = dataset.spec.styles
    x0 = dataset_latents(dataset)[val_idx].to(backend.dtype)
    enc = backend.text_encoder
    matched = torch.stack([enc(dataset.styles[i]).tokens for i in val_idx])
    wrong = torch.stack(
        [enc(styles[(styles.index(dataset.styles[i]) + 1) % len(styles)]).tokens for i in val_idx]
    )
    return (
        eps_mse(backend.model, x0, matched.to(backend.dtype), backend.schedule, seed),
        eps_mse(backend.model, x0, wrong.to(backend.dtype), backend.schedule, seed),
    )


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------
def save_snapshot(backend: ToyBackend, directory: Path) -> Path:
    """Write ``toy-<hash12>.pt`` plus a JSON sidecar with the same metadata."""
    if backend.meta is None:
        raise ContractError("backend has no snapshot metadata")
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"toy-{backend.content_hash[:12]}.pt"
    meta_json = backend.meta.model_dump(mode="json")
    torch.save({"meta": meta_json, "state_dict": backend.model.state_dict()}, path)
    path.with_suffix(".json").write_text(backend.meta.model_dump_json(indent=2))
    return path


def load_snapshot(path: Path) -> ToyBackend:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = SnapshotMeta.model_validate(payload["meta"])
    model = ToyDenoiser(meta.architecture)
    model.load_state_dict(payload["state_dict"])
    if parameter_hash(model) != meta.content_hash:
        raise ContractError(f"snapshot {path} does not match its content hash")
    return ToyBackend(model, meta.schedule.build(), meta)
