"""Toy latent diffusion: noise schedule construction, epsilon-prediction
training on adjusted latents, a conditional UNet with addressable attention
blocks, and a unified ancestral/deterministic sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError
from .nets import ResBlock, SelfAttention2d, attention_forward, group_norm, timestep_embedding, zero_init

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_SAMPLE_STEPS = 50


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    kind: str = "linear",
) -> NoiseSchedule:
    if T <= 0:
        raise ConfigError(f"schedule length must be positive, got {T}")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError(f"bad beta range ({beta_start}, {beta_end})")
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "cosine":
        s = 0.008
        steps = torch.arange(T + 1, dtype=torch.float64) / T
        abar = torch.cos((steps + s) / (1 + s) * math.pi / 2).pow(2)
        abar = abar / abar[0]
        betas = torch.clamp(1.0 - abar[1:] / abar[:-1], max=0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(
        betas=betas.float(), alphas=alphas.float(), alpha_bars=alpha_bars.float()
    )


def _gather(table: torch.Tensor, t: torch.Tensor | int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, int):
        t = torch.tensor([t])
    vals = table.to(like.dtype)[t]
    return vals.reshape(-1, *([1] * (like.ndim - 1)))


def add_noise(
    x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    abar = _gather(s.alpha_bars, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


class ConditionalUNet(nn.Module):
    """Epsilon-prediction UNet over latent grids with sinusoidal timestep
    features, an additive label embedding, and self-attention blocks listed
    in `attentions` (each addressable by its `key`). `forward` is the
    single-branch view of `forward_joint`, so base and joint sampling share
    one code path.
    """

    def __init__(
        self,
        in_channels: int = 4,
        base_channels: int = 48,
        vocab_size: int = 10,
        tdim: int = 192,
    ):
        super().__init__()
        c = base_channels
        c2, c3 = 2 * c, 8 * c // 3
        self.in_channels = in_channels
        self.vocab_size = vocab_size
        self.tdim = tdim

        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.label_emb = nn.Embedding(vocab_size, tdim)

        self.conv_in = nn.Conv2d(in_channels, c, 3, padding=1)
        self.res1 = ResBlock(c, c, tdim, key="res0")
        self.down1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.res2 = ResBlock(c, c2, tdim, key="res1")
        self.attn1 = SelfAttention2d(c2, key="attn0")
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.res3 = ResBlock(c2, c3, tdim, key="res2")
        self.attn2 = SelfAttention2d(c3, key="attn1")
        self.mid1 = ResBlock(c3, c3, tdim, key="res3")
        self.attn3 = SelfAttention2d(c3, key="attn2")
        self.mid2 = ResBlock(c3, c3, tdim, key="res4")
        self.res4 = ResBlock(2 * c3, c3, tdim, key="res5")
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c3, c2, 3, padding=1))
        self.res5 = ResBlock(2 * c2, c2, tdim, key="res6")
        self.up2 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c2, c, 3, padding=1))
        self.res6 = ResBlock(2 * c, c, tdim, key="res7")
        self.head = nn.Sequential(group_norm(c), nn.SiLU(), zero_init(nn.Conv2d(c, in_channels, 3, padding=1)))

        self.attentions = [self.attn1, self.attn2, self.attn3]
        self.res_blocks = [
            self.res1, self.res2, self.res3, self.mid1, self.mid2,
            self.res4, self.res5, self.res6,
        ]

    def lora_targets(self) -> list[tuple[str, str, int, int]]:
        """(block key, projection name, in_features, out_features) for every
        adaptable projection: attention q/k/v/out plus each residual block's
        timestep-conditioning projection."""
        targets = []
        for block in self.attentions:
            for name in ("to_q", "to_k", "to_v", "to_out"):
                proj = getattr(block, name)
                targets.append((block.key, name, proj.in_features, proj.out_features))
        for block in self.res_blocks:
            targets.append(
                (block.key, "temb_proj", block.temb_proj.in_features, block.temb_proj.out_features)
            )
        return targets

    def _embed(self, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if labels.min() < 0 or labels.max() >= self.vocab_size:
            raise ConfigError(
                f"label outside vocabulary [0, {self.vocab_size}): {labels.tolist()}"
            )
        # Cast to the mlp's own dtype so a double-converted model still runs.
        t = t.to(self.time_mlp[0].weight.dtype)
        temb = self.time_mlp(timestep_embedding(t, self.tdim))
        return temb + self.label_emb(labels)

    def forward_joint(
        self,
        xs: list[torch.Tensor],
        t: torch.Tensor,
        labels: list[torch.Tensor],
        adapters: list | None = None,
        share: bool = False,
        logit_mask: torch.Tensor | None = None,
    ) -> list[torch.Tensor]:
        if len(labels) != len(xs):
            raise ValueError("one label tensor per branch required")
        if adapters is None:
            adapters = [None] * len(xs)
        tembs = [self._embed(t, lab) for lab in labels]

        def attend(block, hs):
            return attention_forward(block, hs, adapters=adapters, share=share, logit_mask=logit_mask)

        def res(block, hs, skips=None):
            if skips is not None:
                hs = [torch.cat([h, s], dim=1) for h, s in zip(hs, skips)]
            return [block(h, e, ad) for h, e, ad in zip(hs, tembs, adapters)]

        hs = [self.conv_in(x) for x in xs]
        s1 = res(self.res1, hs)
        hs = [self.down1(h) for h in s1]
        hs = res(self.res2, hs)
        s2 = attend(self.attn1, hs)
        hs = [self.down2(h) for h in s2]
        hs = res(self.res3, hs)
        s3 = attend(self.attn2, hs)
        hs = res(self.mid1, s3)
        hs = attend(self.attn3, hs)
        hs = res(self.mid2, hs)
        hs = res(self.res4, hs, s3)
        hs = [self.up1(h) for h in hs]
        hs = res(self.res5, hs, s2)
        hs = [self.up2(h) for h in hs]
        hs = res(self.res6, hs, s1)
        return [self.head(h) for h in hs]

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.forward_joint([x], t, [labels])[0]


def denoise_loss(
    model,
    x_a: torch.Tensor,
    t: torch.Tensor,
    labels: torch.Tensor,
    eps: torch.Tensor,
    s: NoiseSchedule,
) -> torch.Tensor:
    """MSE between the injected noise and the model's prediction at t."""
    x_t = add_noise(x_a, t, eps, s)
    return F.mse_loss(model(x_t, t, labels), eps)


def sampler_plan(
    s: NoiseSchedule, sampler: str, steps: int, eta: float | None = None
) -> tuple[float, np.ndarray]:
    """Validate sampler settings; return (eta, descending timestep indices)."""
    if sampler not in ("ddpm", "ddim"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    if steps > s.T:
        raise ConfigError(f"steps {steps} exceeds schedule length {s.T}")
    if steps <= 0:
        raise ConfigError("steps must be positive")
    if eta is None:
        eta = 1.0 if sampler == "ddpm" else 0.0
    # Descending timesteps from T-1; a single step still starts at T-1.
    ts = np.unique(np.linspace(s.T - 1, 0, steps).round().astype(int))[::-1]
    return eta, ts


def step_alpha_bars(s: NoiseSchedule, ts: np.ndarray, i: int) -> tuple[float, float]:
    """(abar_t, abar_prev) for position i of a descending timestep plan;
    abar_prev is 1 past the final step."""
    t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
    abar_t = float(s.alpha_bars[int(ts[i])])
    abar_prev = float(s.alpha_bars[t_prev]) if t_prev >= 0 else 1.0
    return abar_t, abar_prev


def eta_update(
    x: torch.Tensor,
    eps_hat: torch.Tensor,
    abar_t: float,
    abar_prev: float,
    eta: float,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse-process update; eta 0 is the deterministic limit, eta 1
    the ancestral one. `noise` is required only when sigma > 0."""
    x0 = (x - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    sigma = eta * math.sqrt(max((1.0 - abar_prev) / (1.0 - abar_t), 0.0)) * math.sqrt(
        max(1.0 - abar_t / abar_prev, 0.0)
    )
    dir_coef = math.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0))
    out = math.sqrt(abar_prev) * x0 + dir_coef * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic step requires noise")
        out = out + sigma * noise
    return out


def step_needs_noise(abar_t: float, abar_prev: float, eta: float) -> bool:
    sigma = eta * math.sqrt(max((1.0 - abar_prev) / (1.0 - abar_t), 0.0)) * math.sqrt(
        max(1.0 - abar_t / abar_prev, 0.0)
    )
    return sigma > 0


def sample(
    model,
    label: int,
    s: NoiseSchedule,
    sampler: str = "ddim",
    steps: int = DEFAULT_SAMPLE_STEPS,
    seed: int = 0,
    shape: tuple[int, ...] = (1, 4, 16, 16),
    eta: float | None = None,
) -> torch.Tensor:
    """Denoise pure noise down the schedule. `ddpm` uses per-step noise
    (eta 1); `ddim` is deterministic (eta 0). Identical (seed, sampler,
    steps) always produce the identical latent."""
    eta, ts = sampler_plan(s, sampler, steps, eta)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g)
    labels = torch.full((shape[0],), label, dtype=torch.long)

    with torch.no_grad():
        for i, t in enumerate(ts):
            abar_t, abar_prev = step_alpha_bars(s, ts, i)
            t_batch = torch.full((shape[0],), int(t), dtype=torch.long)
            eps_hat = model(x, t_batch, labels)
            noise = (
                torch.randn(shape, generator=g)
                if step_needs_noise(abar_t, abar_prev, eta)
                else None
            )
            x = eta_update(x, eps_hat, abar_t, abar_prev, eta, noise)
    return x


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    base_channels: int = 48
    metrics: list = field(default_factory=list)
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    on_checkpoint: object = None  # callable(step, model, opt)


def train_diffusion(
    latents: torch.Tensor,
    labels: torch.Tensor,
    model: ConditionalUNet,
    s: NoiseSchedule,
    config: DiffusionTrainConfig,
    opt: torch.optim.Optimizer | None = None,
    start_step: int = 0,
) -> ConditionalUNet:
    """Optimize epsilon-prediction over uniformly sampled timesteps.

    latents: (n, c, h, w) adjusted latents; labels: (n,) condition ids.
    Passing `opt` and `start_step` resumes a previous run's state.
    """
    if latents.ndim != 4 or latents.shape[0] == 0:
        raise ConfigError("train_diffusion: empty or misshapen latent set")
    if latents.shape[0] != labels.shape[0]:
        raise ConfigError("one label per latent required")
    if opt is None:
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr)

    n = latents.shape[0]
    for step in range(start_step, config.steps):
        # Per-step seeding keeps the noise stream identical whether the run
        # was interrupted and resumed or ran straight through.
        gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        t = torch.randint(0, s.T, (config.batch_size,), generator=gen)
        eps = torch.randn(latents[idx].shape, generator=gen)
        loss = denoise_loss(model, latents[idx], t, labels[idx], eps, s)
        opt.zero_grad()
        loss.backward()
        opt.step()
        config.metrics.append({"step": step, "loss": float(loss.detach())})
        if (
            config.checkpoint_every
            and config.on_checkpoint is not None
            and (step + 1) % config.checkpoint_every == 0
        ):
            config.on_checkpoint(step + 1, model, opt)
    return model
