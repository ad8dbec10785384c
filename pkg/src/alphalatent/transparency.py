"""Alpha-as-latent-offset codec. A zero-initialized encoder turns a padded
RGB + alpha pair into a latent offset, scaled elementwise by the frozen
autoencoder's posterior deviation; a UNet decoder recovers RGBA from the
frozen RGB reconstruction plus the adjusted latent. Training balances
reconstruction, an identity term keeping the adjusted latent decodable by the
frozen model, and a hinge adversarial term from a patch discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .autoencoder import FrozenAutoencoder
from .errors import GateFailure
from .nets import ResBlock, conv_block, group_norm, hwc_to_batch, zero_init
from .pixels import TransparentImage, pad_undefined, premultiply

LAMBDA_OFFSET = 100.0
LAMBDA_RECON = 1.0
LAMBDA_IDENTITY = 1.0
LAMBDA_DISC = 0.01
DISC_WARMUP = 2000


class TransparencyEncoder(nn.Module):
    """RGBA -> latent offset; the output convolution is zero-initialized so a
    fresh encoder emits exactly zero for any input."""

    def __init__(self, base_channels: int = 32, latent_channels: int = 4):
        super().__init__()
        c = base_channels
        self.latent_channels = latent_channels
        self.stack = nn.Sequential(
            conv_block(4, c),
            conv_block(c, 2 * c, stride=2),
            conv_block(2 * c, 3 * c, stride=2),
            conv_block(3 * c, 3 * c),
            zero_init(nn.Conv2d(3 * c, latent_channels, 3, padding=1)),
        )

    def forward(self, rgba: torch.Tensor) -> torch.Tensor:
        return self.stack(rgba)


def encode_transparency(
    padded_rgb: torch.Tensor, alpha: torch.Tensor, enc: TransparencyEncoder
) -> torch.Tensor:
    """Raw latent-shaped offset from Eq-style inputs: padded colors + alpha."""
    if padded_rgb.shape[0] != alpha.shape[0] or padded_rgb.shape[2:] != alpha.shape[2:]:
        raise ValueError("padded_rgb and alpha disagree on batch or spatial dims")
    if padded_rgb.shape[2] % 4 or padded_rgb.shape[3] % 4:
        raise ValueError(
            f"spatial dims {tuple(padded_rgb.shape[2:])} do not map onto the latent grid"
        )
    return enc(torch.cat([padded_rgb, alpha], dim=1))


def scale_offset(
    x_offset: torch.Tensor, x_std: torch.Tensor, lambda_offset: float = LAMBDA_OFFSET
) -> torch.Tensor:
    """x_eps = lambda * std * offset, all elementwise."""
    if x_offset.shape != x_std.shape:
        raise ValueError(f"offset shape {tuple(x_offset.shape)} != std {tuple(x_std.shape)}")
    if not bool((x_std > 0).all()):
        raise ValueError("x_std must be strictly positive")
    return lambda_offset * x_std * x_offset


@dataclass(frozen=True)
class AdjustedLatentBundle:
    x: torch.Tensor
    x_eps: torch.Tensor
    x_a: torch.Tensor

    def __post_init__(self):
        if not torch.equal(self.x_a, self.x + self.x_eps):
            raise ValueError("x_a must equal x + x_eps exactly")


class TransparencyDecoder(nn.Module):
    """UNet over the frozen RGB reconstruction with the adjusted latent added
    into the middle block and additive skip connections on the way up.
    Outputs rgb in [-1, 1] (tanh) and alpha in [0, 1] (sigmoid)."""

    def __init__(self, base_channels: int = 32, latent_channels: int = 4):
        super().__init__()
        c = base_channels
        self.enc1 = conv_block(3, c)
        self.enc2 = conv_block(c, 2 * c, stride=2)
        self.enc3 = conv_block(2 * c, 3 * c, stride=2)
        self.latent_proj = nn.Conv2d(latent_channels, 3 * c, 3, padding=1)
        self.mid = ResBlock(3 * c, 3 * c)
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), conv_block(3 * c, 2 * c))
        self.up2 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), conv_block(2 * c, c))
        self.head = nn.Sequential(group_norm(c), nn.SiLU(), nn.Conv2d(c, 4, 3, padding=1))

    def forward(self, recon_rgb: torch.Tensor, x_a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        e1 = self.enc1(recon_rgb)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        h = self.mid(e3 + self.latent_proj(x_a))
        h = self.up1(h) + e2
        h = self.up2(h) + e1
        out = self.head(h)
        return torch.tanh(out[:, :3]), torch.sigmoid(out[:, 3:4])


def decode_transparency(
    recon_rgb: torch.Tensor, x_a: torch.Tensor, dec: TransparencyDecoder
) -> tuple[torch.Tensor, torch.Tensor]:
    if (recon_rgb.shape[2] != 4 * x_a.shape[2]) or (recon_rgb.shape[3] != 4 * x_a.shape[3]):
        raise ValueError(
            f"image {tuple(recon_rgb.shape[2:])} and latent {tuple(x_a.shape[2:])} scales disagree"
        )
    return dec(recon_rgb, x_a)


class PatchDiscriminator(nn.Module):
    """Five stages ending in a 1-channel patch map; no norm or activation on
    the final decision layer."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.stack = nn.Sequential(
            conv_block(4, c),
            conv_block(c, 2 * c, stride=2),
            conv_block(2 * c, 4 * c, stride=2),
            conv_block(4 * c, 8 * c, stride=2),
            nn.Conv2d(8 * c, 1, 3, padding=1),
        )

    def forward(self, rgba: torch.Tensor) -> torch.Tensor:
        return self.stack(rgba)


def recon_loss(
    target_rgb: torch.Tensor,
    target_alpha: torch.Tensor,
    rgb_hat: torch.Tensor,
    alpha_hat: torch.Tensor,
) -> torch.Tensor:
    """MSE on colors plus MSE on alpha, the two means summed."""
    if target_rgb.shape != rgb_hat.shape or target_alpha.shape != alpha_hat.shape:
        raise ValueError("prediction shapes disagree with targets")
    return F.mse_loss(rgb_hat, target_rgb) + F.mse_loss(alpha_hat, target_alpha)


def disc_generator_loss(
    rgb_hat: torch.Tensor, alpha_hat: torch.Tensor, disc: PatchDiscriminator
) -> torch.Tensor:
    """Mean over the patch map of relu(1 - D(fake)); pushes decisions up."""
    return F.relu(1.0 - disc(torch.cat([rgb_hat, alpha_hat], dim=1))).mean()


def disc_step(
    real_rgba: torch.Tensor,
    fake_rgba: torch.Tensor,
    disc: PatchDiscriminator,
    opt: torch.optim.Optimizer,
    step: int,
    warmup: int = DISC_WARMUP,
) -> float:
    """One hinge update: relu(1 - D(real)) + relu(1 + D(fake)); the fake batch
    is detached so no gradient ever reaches the generator. Before the warm-up
    step this is a no-op returning 0."""
    if step < warmup:
        return 0.0
    loss = F.relu(1.0 - disc(real_rgba)).mean() + F.relu(1.0 + disc(fake_rgba.detach())).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def total_vae_loss(
    l_recon: torch.Tensor,
    l_identity: torch.Tensor,
    l_disc: torch.Tensor,
    lambda_recon: float = LAMBDA_RECON,
    lambda_identity: float = LAMBDA_IDENTITY,
    lambda_disc: float = LAMBDA_DISC,
) -> torch.Tensor:
    return lambda_recon * l_recon + lambda_identity * l_identity + lambda_disc * l_disc


@dataclass
class CodecBatch:
    """Precomputed per-image tensors the codec trains on."""

    premult: torch.Tensor  # (n, 3, h, w) premultiplied colors
    padded: torch.Tensor  # (n, 3, h, w) colors with undefined pixels filled
    alpha: torch.Tensor  # (n, 1, h, w)
    mean: torch.Tensor  # (n, c, h/4, w/4) frozen posterior mean
    std: torch.Tensor  # (n, c, h/4, w/4) frozen posterior std


def prepare_codec_batch(
    images: list[TransparentImage], ae: FrozenAutoencoder, encode_batch: int = 32
) -> CodecBatch:
    premult = hwc_to_batch([premultiply(img).rgb for img in images])
    padded = hwc_to_batch([pad_undefined(img).rgb for img in images])
    alpha = hwc_to_batch([img.alpha for img in images])
    means, stds = [], []
    with torch.no_grad():
        for start in range(0, len(images), encode_batch):
            m, s = ae.encode(premult[start : start + encode_batch])
            means.append(m)
            stds.append(s)
    return CodecBatch(
        premult=premult,
        padded=padded,
        alpha=alpha,
        mean=torch.cat(means),
        std=torch.cat(stds),
    )


def codec_losses(
    batch: CodecBatch,
    idx: torch.Tensor,
    ae: FrozenAutoencoder,
    enc: TransparencyEncoder,
    dec: TransparencyDecoder,
    disc: PatchDiscriminator | None,
    lambda_offset: float = LAMBDA_OFFSET,
    dropout_mask: torch.Tensor | None = None,
) -> dict:
    """Shared forward pass for training and gradient checking. Returns the
    component losses plus the prediction tensors."""
    premult = batch.premult[idx]
    padded = batch.padded[idx]
    alpha = batch.alpha[idx]

    x_offset = encode_transparency(padded, alpha, enc)
    x_eps = scale_offset(x_offset, batch.std[idx], lambda_offset)
    if dropout_mask is not None:
        x_eps = x_eps * dropout_mask[:, None, None, None]
    x_a = batch.mean[idx] + x_eps

    recon_rgb = ae.decode(x_a)
    l_identity = F.mse_loss(premult, recon_rgb)
    rgb_hat, alpha_hat = decode_transparency(recon_rgb, x_a, dec)
    l_recon = recon_loss(padded, alpha, rgb_hat, alpha_hat)
    if disc is not None:
        l_disc = disc_generator_loss(rgb_hat, alpha_hat, disc)
    else:
        l_disc = torch.zeros((), dtype=l_recon.dtype)
    return {
        "recon": l_recon,
        "identity": l_identity,
        "disc": l_disc,
        "rgb_hat": rgb_hat,
        "alpha_hat": alpha_hat,
        "x_a": x_a,
    }


@dataclass
class CodecTrainConfig:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    disc_lr: float = 1e-4
    seed: int = 0
    base_channels: int = 32
    lambda_offset: float = LAMBDA_OFFSET
    lambda_recon: float = LAMBDA_RECON
    lambda_identity: float = LAMBDA_IDENTITY
    lambda_disc: float = LAMBDA_DISC
    disc_warmup: int = DISC_WARMUP
    offset_dropout: float = 0.0  # robust-decoder variant trains with 0.3
    metrics: list = field(default_factory=list)  # one row dict per step


def train_codec(
    images: list[TransparentImage],
    ae: FrozenAutoencoder,
    config: CodecTrainConfig,
    models: tuple[TransparencyEncoder, TransparencyDecoder, PatchDiscriminator] | None = None,
    opts: tuple[torch.optim.Optimizer, torch.optim.Optimizer] | None = None,
    start_step: int = 0,
    identity_baseline: float | None = None,
) -> tuple[TransparencyEncoder, TransparencyDecoder, PatchDiscriminator]:
    """Alternating generator/discriminator training on precomputed tensors.

    The adversarial term is enabled for both sides at the same warm-up step.
    The identity term is watched for divergence: a non-finite value or a
    cumulative mean above 10x the baseline (the first executed step's value
    unless `identity_baseline` carries one over from an interrupted run)
    aborts the run. Passing `models`, `opts` and `start_step` resumes.
    """
    if not ae.frozen:
        raise ValueError("train_codec requires a frozen autoencoder")
    if models is None:
        torch.manual_seed(config.seed)
        enc = TransparencyEncoder(base_channels=config.base_channels)
        dec = TransparencyDecoder(base_channels=config.base_channels)
        disc = PatchDiscriminator(base_channels=config.base_channels)
    else:
        enc, dec, disc = models
    if opts is None:
        opt_g = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()), lr=config.lr)
        opt_d = torch.optim.AdamW(disc.parameters(), lr=config.disc_lr)
    else:
        opt_g, opt_d = opts

    batch = prepare_codec_batch(images, ae)
    identity_trace: list[float] = []
    identity_initial = identity_baseline

    for step in range(start_step, config.steps):
        # Per-step seeding keeps the stream identical across resume points.
        gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randint(0, len(images), (config.batch_size,), generator=gen)
        dropout_mask = None
        if config.offset_dropout > 0:
            keep = torch.rand(config.batch_size, generator=gen) >= config.offset_dropout
            dropout_mask = keep.float()
        adversarial = step >= config.disc_warmup
        losses = codec_losses(
            batch, idx, ae, enc, dec,
            disc if adversarial else None,
            lambda_offset=config.lambda_offset,
            dropout_mask=dropout_mask,
        )
        total = total_vae_loss(
            losses["recon"], losses["identity"], losses["disc"],
            config.lambda_recon, config.lambda_identity, config.lambda_disc,
        )
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        fake = torch.cat([losses["rgb_hat"], losses["alpha_hat"]], dim=1)
        real = torch.cat([batch.padded[idx], batch.alpha[idx]], dim=1)
        d_loss = disc_step(real, fake, disc, opt_d, step, warmup=config.disc_warmup)

        l_identity = float(losses["identity"].detach())
        if not np.isfinite(l_identity):
            raise GateFailure(f"identity loss not finite at step {step}")
        identity_trace.append(l_identity)
        # step 0 runs with the offset still exactly zero, so its identity
        # value is the frozen round-trip baseline; a sustained running mean
        # 10x above it means offsets are wrecking the latent distribution
        # (the 0.1 floor keeps single-batch baseline noise from false trips)
        if identity_initial is None:
            identity_initial = l_identity
        if step >= 100 and len(identity_trace) >= 50:
            window = identity_trace[-200:]
            running = sum(window) / len(window)
            limit = max(10.0 * identity_initial, 0.1)
            if running > limit:
                raise GateFailure(
                    f"identity loss diverged at step {step}: running mean {running:.4g} "
                    f"exceeds limit {limit:.4g}"
                )
        config.metrics.append(
            {
                "step": step,
                "L_recon": float(losses["recon"].detach()),
                "L_identity": l_identity,
                "L_disc": float(losses["disc"].detach()),
                "total": float(total.detach()),
                "d_loss": d_loss,
            }
        )
    return enc, dec, disc


def encode_adjusted(
    img: TransparentImage,
    ae: FrozenAutoencoder,
    enc: TransparencyEncoder,
    lambda_offset: float = LAMBDA_OFFSET,
) -> AdjustedLatentBundle:
    """Full encode path for one image: pad, premultiply, frozen posterior,
    offset, adjusted latent."""
    premult = hwc_to_batch([premultiply(img).rgb])
    padded = hwc_to_batch([pad_undefined(img).rgb])
    alpha = hwc_to_batch([img.alpha])
    with torch.no_grad():
        mean, std = ae.encode(premult)
        x_offset = encode_transparency(padded, alpha, enc)
        x_eps = scale_offset(x_offset, std, lambda_offset)
    return AdjustedLatentBundle(x=mean, x_eps=x_eps, x_a=mean + x_eps)


def decode_adjusted(
    x_a: torch.Tensor, ae: FrozenAutoencoder, dec: TransparencyDecoder
) -> TransparentImage:
    """Decode an adjusted latent to RGBA via the frozen RGB reconstruction."""
    with torch.no_grad():
        recon_rgb = ae.decode(x_a)
        rgb_hat, alpha_hat = decode_transparency(recon_rgb, x_a, dec)
    rgb = np.moveaxis(rgb_hat[0].numpy(), 0, -1)
    alpha = np.moveaxis(alpha_hat[0].numpy(), 0, -1)
    return TransparentImage(rgb=np.clip(rgb, -1.0, 1.0), alpha=np.clip(alpha, 0.0, 1.0))


def roundtrip(
    img: TransparentImage,
    ae: FrozenAutoencoder,
    enc: TransparencyEncoder,
    dec: TransparencyDecoder,
    lambda_offset: float = LAMBDA_OFFSET,
) -> TransparentImage:
    bundle = encode_adjusted(img, ae, enc, lambda_offset)
    return decode_adjusted(bundle.x_a, ae, dec)
