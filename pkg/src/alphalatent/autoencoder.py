"""Small diagonal-Gaussian image autoencoder, trained once on premultiplied
RGB images and then frozen. Downstream stages treat it as an immutable
fixture: its posterior mean is the working latent, its deviation output
scales transparency offsets, and the identity objective measures how much a
latent offset damages its reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError
from .nets import conv_block, group_norm, hwc_to_batch

DOWNSAMPLE_FACTOR = 4
LATENT_CHANNELS = 4
KL_WEIGHT = 1e-6
_LOGVAR_RANGE = (-30.0, 20.0)


class FrozenAutoencoder(nn.Module):
    """Encoder and decoder with a frozen flag; once frozen, weights are
    immutable and encode/decode are deterministic pure functions."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.f = DOWNSAMPLE_FACTOR
        self.c = LATENT_CHANNELS
        self.frozen = False
        self.encoder = nn.Sequential(
            conv_block(3, c),
            conv_block(c, 2 * c, stride=2),
            conv_block(2 * c, 3 * c, stride=2),
            conv_block(3 * c, 3 * c),
            nn.Conv2d(3 * c, 2 * LATENT_CHANNELS, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, 3 * c, 3, padding=1),
            group_norm(3 * c),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            conv_block(3 * c, 2 * c),
            nn.Upsample(scale_factor=2, mode="nearest"),
            conv_block(2 * c, c),
            nn.Conv2d(c, 3, 3, padding=1),
        )

    def freeze(self) -> "FrozenAutoencoder":
        self.requires_grad_(False)
        for p in self.parameters():  # drop any gradient buffers left by training
            p.grad = None
        self.eval()
        self.frozen = True
        return self

    def encode(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior (mean, std) of shape (b, c, h/f, w/f); std is strictly
        positive. Raises on spatial dims not divisible by the downsample
        factor (the latent grid would not round-trip)."""
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(f"expected (b, 3, h, w) input, got {tuple(img.shape)}")
        if img.shape[2] % self.f or img.shape[3] % self.f:
            raise ValueError(
                f"spatial dims {img.shape[2]}x{img.shape[3]} not divisible by {self.f}"
            )
        moments = self.encoder(img)
        mean, logvar = torch.chunk(moments, 2, dim=1)
        logvar = torch.clamp(logvar, *_LOGVAR_RANGE)
        return mean, torch.exp(0.5 * logvar)

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        """Raw (unclamped) RGB decode of a (b, c, h/f, w/f) latent."""
        if x.ndim != 4 or x.shape[1] != self.c:
            raise ValueError(f"expected (b, {self.c}, h, w) latent, got {tuple(x.shape)}")
        return self.decoder(x)


def encode_base(ae: FrozenAutoencoder, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return ae.encode(img)


def decode_base(ae: FrozenAutoencoder, x: torch.Tensor) -> torch.Tensor:
    return ae.decode(x)


@dataclass
class BaseTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    base_channels: int = 32
    kl_weight: float = KL_WEIGHT
    log_every: int = 50
    metrics: list = field(default_factory=list)  # appended dict rows


def train_base(
    images: list[np.ndarray],
    config: BaseTrainConfig,
    model: FrozenAutoencoder | None = None,
    opt: torch.optim.Optimizer | None = None,
    start_step: int = 0,
) -> FrozenAutoencoder:
    """Train the autoencoder on (h, w, 3) premultiplied RGB arrays and return
    it frozen. Reconstruction MSE on a sampled latent plus a small KL term.
    Passing `model`, `opt` and `start_step` resumes an interrupted run."""
    if not images:
        raise ConfigError("train_base: empty dataset")
    if model is None:
        torch.manual_seed(config.seed)
        ae = FrozenAutoencoder(base_channels=config.base_channels)
    else:
        ae = model
    if opt is None:
        opt = torch.optim.AdamW(ae.parameters(), lr=config.lr)
    data = hwc_to_batch(images)

    for step in range(start_step, config.steps):
        # Per-step seeding keeps the stream identical across resume points.
        gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randint(0, len(images), (config.batch_size,), generator=gen)
        batch = data[idx]
        mean, std = ae.encode(batch)
        noise = torch.randn(mean.shape, generator=gen)
        z = mean + std * noise
        recon = ae.decode(z)
        recon_loss = F.mse_loss(recon, batch)
        logvar = 2.0 * torch.log(std)
        kl = -0.5 * torch.mean(1.0 + logvar - mean.pow(2) - logvar.exp())
        loss = recon_loss + config.kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            config.metrics.append(
                {
                    "step": step,
                    "recon": float(recon_loss.detach()),
                    "kl": float(kl.detach()),
                    "total": float(loss.detach()),
                }
            )
    return ae.freeze()


def identity_loss(img: torch.Tensor, x_eps: torch.Tensor, ae: FrozenAutoencoder) -> torch.Tensor:
    """MSE between img and the frozen round trip with the offset injected:
    decode(encode(img).mean + x_eps). Gradients reach x_eps only; the frozen
    weights hold no grad."""
    if not ae.frozen:
        raise ValueError("identity_loss requires a frozen autoencoder")
    mean, _ = ae.encode(img)
    if x_eps.shape != mean.shape:
        raise ValueError(f"offset shape {tuple(x_eps.shape)} != latent {tuple(mean.shape)}")
    recon = ae.decode(mean + x_eps)
    return F.mse_loss(img, recon)
