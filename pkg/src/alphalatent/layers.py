"""Joint two-branch layer generation over a frozen diffusion backbone.

Foreground and background denoise in lockstep: every attention block runs
one softmax over both branches' concatenated tokens, and each branch adds
its own low-rank adapter deltas. Conditional modes hold one branch at a
clean latent (never noised, never updated) and denoise only the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .autoencoder import FrozenAutoencoder
from .data import LayerPair
from .diffusion import (
    ConditionalUNet,
    NoiseSchedule,
    add_noise,
    eta_update,
    sampler_plan,
    step_alpha_bars,
    step_needs_noise,
)
from .errors import ConfigError
from .lora import LoRAWeights
from .nets import attention_forward, hwc_to_batch
from .pixels import TransparentImage, compose_stack
from .transparency import (
    LAMBDA_OFFSET,
    TransparencyDecoder,
    TransparencyEncoder,
    decode_adjusted,
    encode_adjusted,
)

MODES = ("joint", "fg-cond", "bg-cond")


@dataclass(frozen=True)
class JointState:
    """One joint denoising step's inputs: both branch latents, one shared
    timestep, one shared condition."""

    x_f: torch.Tensor
    x_b: torch.Tensor
    t: torch.Tensor
    condition: torch.Tensor

    def __post_init__(self):
        if self.x_f.shape != self.x_b.shape:
            raise ValueError(
                f"branch latents differ: {tuple(self.x_f.shape)} vs {tuple(self.x_b.shape)}"
            )
        b = self.x_f.shape[0]
        if self.t.shape != (b,) or self.condition.shape != (b,):
            raise ValueError("timestep and condition must be one per sample")


def shared_attention(block, x_f, x_b, adapters=None, logit_mask=None):
    """One attention block over both branches with a joint 2N-token softmax."""
    out = attention_forward(
        block, [x_f, x_b], adapters=adapters, share=True, logit_mask=logit_mask
    )
    return out[0], out[1]


def joint_denoise_loss(
    base: ConditionalUNet,
    lora_f: LoRAWeights,
    lora_b: LoRAWeights,
    state: JointState,
    eps_f: torch.Tensor,
    eps_b: torch.Tensor,
    s: NoiseSchedule,
    share: bool = True,
) -> torch.Tensor:
    """Noise both branches with the shared timestep, run the merged forward,
    return the mean squared error over the concatenation of both noises."""
    xt_f = add_noise(state.x_f, state.t, eps_f, s)
    xt_b = add_noise(state.x_b, state.t, eps_b, s)
    preds = base.forward_joint(
        [xt_f, xt_b],
        state.t,
        [state.condition, state.condition],
        adapters=[lora_f, lora_b],
        share=share,
    )
    err = torch.cat([(preds[0] - eps_f).flatten(), (preds[1] - eps_b).flatten()])
    return err.square().mean()


@dataclass(frozen=True)
class LayerLatents:
    """Latent-space training set: adjusted foreground latents, base
    background latents, one shared condition id per pair."""

    x_f: torch.Tensor
    x_b: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if not (self.x_f.shape[0] == self.x_b.shape[0] == self.labels.shape[0]):
            raise ValueError("foreground, background and labels must align")


def prepare_layer_latents(
    pairs: list[LayerPair],
    ae: FrozenAutoencoder,
    enc: TransparencyEncoder,
    lambda_offset: float = LAMBDA_OFFSET,
) -> LayerLatents:
    """Encode layer pairs: foregrounds through the transparency offset path,
    backgrounds through the frozen base encoder alone."""
    if not pairs:
        raise ConfigError("no layer pairs given")
    xf, xb, labels = [], [], []
    with torch.no_grad():
        for pair in pairs:
            bundle = encode_adjusted(pair.foreground, ae, enc, lambda_offset=lambda_offset)
            xf.append(bundle.x_a)
            mean, _ = ae.encode(hwc_to_batch([pair.background]))
            xb.append(mean)
            labels.append(pair.labels[1])
    return LayerLatents(
        x_f=torch.cat(xf), x_b=torch.cat(xb), labels=torch.tensor(labels, dtype=torch.long)
    )


@dataclass
class LayerTrainConfig:
    steps: int = 600
    batch_size: int = 4
    lr: float = 1e-3
    rank: int = 8
    seed: int = 0
    mode: str = "joint"
    share: bool = True
    metrics: list = field(default_factory=list)
    checkpoint_every: int = 0
    on_checkpoint: object = None  # callable(step, lora_f, lora_b, opt)


def train_layers(
    data: LayerLatents,
    base: ConditionalUNet,
    s: NoiseSchedule,
    config: LayerTrainConfig,
    adapters: tuple[LoRAWeights, LoRAWeights] | None = None,
    opt: torch.optim.Optimizer | None = None,
    start_step: int = 0,
) -> tuple[LoRAWeights, LoRAWeights]:
    """Optimize the two branch adapters; the base model is frozen in place.

    joint mode noises both branches and scores both; fg-cond holds the
    foreground clean (unscaled, excluded from the loss) and denoises the
    background; bg-cond is the mirror image.
    """
    if config.mode not in MODES:
        raise ConfigError(f"unknown layer training mode {config.mode!r}")
    if data.x_f.shape[0] == 0:
        raise ConfigError("empty layer latent set")
    base.requires_grad_(False)
    for p in base.parameters():
        p.grad = None

    if adapters is None:
        targets = base.lora_targets()
        adapters = (
            LoRAWeights(targets, rank=config.rank, role="foreground", seed=config.seed * 2 + 1),
            LoRAWeights(targets, rank=config.rank, role="background", seed=config.seed * 2 + 2),
        )
    lora_f, lora_b = adapters
    if opt is None:
        opt = torch.optim.AdamW(
            list(lora_f.parameters()) + list(lora_b.parameters()), lr=config.lr
        )

    n = data.x_f.shape[0]
    for step in range(start_step, config.steps):
        # Per-step seeding keeps the stream identical across resume points.
        gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        t = torch.randint(0, s.T, (config.batch_size,), generator=gen)
        x_f, x_b = data.x_f[idx], data.x_b[idx]
        cond = data.labels[idx]
        state = JointState(x_f=x_f, x_b=x_b, t=t, condition=cond)

        if config.mode == "joint":
            eps_f = torch.randn(x_f.shape, generator=gen)
            eps_b = torch.randn(x_b.shape, generator=gen)
            loss = joint_denoise_loss(base, lora_f, lora_b, state, eps_f, eps_b, s, share=config.share)
        else:
            clean_fg = config.mode == "fg-cond"
            eps = torch.randn(x_f.shape, generator=gen)
            noisy = add_noise(x_b if clean_fg else x_f, t, eps, s)
            xs = [x_f, noisy] if clean_fg else [noisy, x_b]
            preds = base.forward_joint(
                xs, t, [cond, cond], adapters=[lora_f, lora_b], share=config.share
            )
            loss = F.mse_loss(preds[1] if clean_fg else preds[0], eps)

        opt.zero_grad()
        loss.backward()
        opt.step()
        config.metrics.append({"step": step, "loss": float(loss.detach())})
        if (
            config.checkpoint_every
            and config.on_checkpoint is not None
            and (step + 1) % config.checkpoint_every == 0
        ):
            config.on_checkpoint(step + 1, lora_f, lora_b, opt)
    return lora_f, lora_b


def sample_joint(
    base: ConditionalUNet,
    lora_f: LoRAWeights,
    lora_b: LoRAWeights,
    label: int,
    s: NoiseSchedule,
    sampler: str = "ddim",
    steps: int = 50,
    seed: int = 0,
    shape: tuple[int, ...] = (1, 4, 16, 16),
    share: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Denoise both branches in lockstep from pure noise."""
    eta, ts = sampler_plan(s, sampler, steps)
    g = torch.Generator().manual_seed(seed)
    x_f = torch.randn(shape, generator=g)
    x_b = torch.randn(shape, generator=g)
    labels = torch.full((shape[0],), label, dtype=torch.long)

    with torch.no_grad():
        for i, t in enumerate(ts):
            abar_t, abar_prev = step_alpha_bars(s, ts, i)
            t_batch = torch.full((shape[0],), int(t), dtype=torch.long)
            eps_f, eps_b = base.forward_joint(
                [x_f, x_b], t_batch, [labels, labels], adapters=[lora_f, lora_b], share=share
            )
            if step_needs_noise(abar_t, abar_prev, eta):
                n_f = torch.randn(shape, generator=g)
                n_b = torch.randn(shape, generator=g)
            else:
                n_f = n_b = None
            x_f = eta_update(x_f, eps_f, abar_t, abar_prev, eta, n_f)
            x_b = eta_update(x_b, eps_b, abar_t, abar_prev, eta, n_b)
    return x_f, x_b


def sample_conditional(
    base: ConditionalUNet,
    lora_f: LoRAWeights,
    lora_b: LoRAWeights,
    clean_side: str,
    clean_latent: torch.Tensor,
    label: int,
    s: NoiseSchedule,
    sampler: str = "ddim",
    steps: int = 50,
    seed: int = 0,
    share: bool = True,
    clean_label: int = 0,
) -> torch.Tensor:
    """Denoise one branch while the other holds `clean_latent` at every step.

    The clean branch is never noised and never updated; `clean_label`
    defaults to the null condition id.
    """
    if clean_side not in ("foreground", "background"):
        raise ConfigError(f"clean_side must be foreground or background, got {clean_side!r}")
    if clean_latent is None:
        raise ConfigError("conditional sampling requires a clean latent")
    eta, ts = sampler_plan(s, sampler, steps)
    shape = tuple(clean_latent.shape)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g)
    gen_labels = torch.full((shape[0],), label, dtype=torch.long)
    clean_labels = torch.full((shape[0],), clean_label, dtype=torch.long)

    with torch.no_grad():
        for i, t in enumerate(ts):
            abar_t, abar_prev = step_alpha_bars(s, ts, i)
            t_batch = torch.full((shape[0],), int(t), dtype=torch.long)
            if clean_side == "foreground":
                xs = [clean_latent, x]
                labs = [clean_labels, gen_labels]
            else:
                xs = [x, clean_latent]
                labs = [gen_labels, clean_labels]
            preds = base.forward_joint(
                xs, t_batch, labs, adapters=[lora_f, lora_b], share=share
            )
            eps_hat = preds[1] if clean_side == "foreground" else preds[0]
            noise = (
                torch.randn(shape, generator=g)
                if step_needs_noise(abar_t, abar_prev, eta)
                else None
            )
            x = eta_update(x, eps_hat, abar_t, abar_prev, eta, noise)
    return x


@dataclass(frozen=True)
class LayerStack:
    """Iteratively generated layers plus the blended condition image each
    layer was generated against."""

    layers: list[TransparentImage]
    conditions: list[np.ndarray]


def iterate_layers(
    labels: list[int],
    base: ConditionalUNet,
    lora_f: LoRAWeights,
    lora_b: LoRAWeights,
    ae: FrozenAutoencoder,
    dec: TransparencyDecoder,
    s: NoiseSchedule,
    sampler: str = "ddim",
    steps: int = 50,
    seed: int = 0,
    canvas: np.ndarray | None = None,
    image_size: int = 64,
    share: bool = True,
    latent_scale: float = 1.0,
) -> LayerStack:
    """Generate layers one at a time, each background-conditioned on the
    blend of everything generated so far (starting from a white canvas).

    `latent_scale` is the normalization the base model was trained under:
    encoded conditions are divided by it and samples multiplied back.
    """
    if not labels:
        raise ConfigError("iterate_layers needs at least one label")
    if canvas is None:
        canvas = np.ones((image_size, image_size, 3), dtype=np.float32)
    stack: list[TransparentImage] = []
    conditions: list[np.ndarray] = []
    with torch.no_grad():
        for i, label in enumerate(labels):
            condition = compose_stack(stack, canvas)
            conditions.append(condition)
            clean, _ = ae.encode(hwc_to_batch([condition]))
            x_f = sample_conditional(
                base,
                lora_f,
                lora_b,
                clean_side="background",
                clean_latent=clean / latent_scale,
                label=label,
                s=s,
                sampler=sampler,
                steps=steps,
                seed=seed + i,
                share=share,
            )
            stack.append(decode_adjusted(x_f * latent_scale, ae, dec))
    return LayerStack(layers=stack, conditions=conditions)
