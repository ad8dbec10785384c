"""Command-line pipeline driver.

One command per process: gen-data, train {base,codec,diffusion,layers},
generate, eval. Every command persists the resolved configuration beside its
outputs and is reproducible from that file plus its seed. Exit codes: 0 ok,
2 configuration error, 3 gate failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import checkpoint as ckpt
from .autoencoder import BaseTrainConfig, FrozenAutoencoder, train_base
from .config import (
    STAGES,
    RunConfig,
    config_digest,
    format_resolved,
    format_value,
    make_config,
    resolve_steps,
)
from .data import VOCABULARY, gen_layer_pair, gen_transparent_sample, sample_specs, specs_digest
from .diffusion import ConditionalUNet, DiffusionTrainConfig, make_schedule, sample, train_diffusion
from .errors import CheckpointError, ConfigError, GateFailure, ShardError
from .layers import (
    LayerTrainConfig,
    LayerLatents,
    iterate_layers,
    prepare_layer_latents,
    sample_conditional,
    sample_joint,
    train_layers,
)
from .lora import LoRAWeights
from .metrics import read_metrics_csv, write_metrics_csv
from .nets import batch_to_hwc, hwc_to_batch
from .pixels import alpha_blend, compose_stack, pad_undefined, premultiply
from .pngio import save_gray, save_rgb, save_rgba
from .shards import TransparentSample, read_dataset, write_dataset
from .transparency import (
    CodecTrainConfig,
    PatchDiscriminator,
    TransparencyDecoder,
    TransparencyEncoder,
    decode_adjusted,
    encode_adjusted,
    train_codec,
)


def out_root(config: RunConfig) -> Path:
    return Path(config.out)


def dataset_dir(config: RunConfig) -> Path:
    return Path(config.dataset) if config.dataset else out_root(config) / "data" / config.name


def checkpoints_dir(config: RunConfig) -> Path:
    return Path(config.checkpoints) if config.checkpoints else out_root(config) / "checkpoints"


def ckpt_path(config: RunConfig, stage: str) -> Path:
    return checkpoints_dir(config) / f"{stage}.ckpt"


def metrics_path(config: RunConfig, stage: str) -> Path:
    return out_root(config) / "metrics" / f"{stage}.csv"


def require_checkpoint(config: RunConfig, stage: str) -> Path:
    path = ckpt_path(config, stage)
    if not path.exists():
        raise ConfigError(
            f"missing {stage} checkpoint at {path}; run `alphalatent train {stage}` first"
        )
    return path


def write_resolved(path: Path, config: RunConfig, command: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_resolved(config, command))


def parse_label(name: str) -> int:
    if name not in VOCABULARY:
        raise ConfigError(f"unknown label {name!r}; choose from {', '.join(VOCABULARY)}")
    return VOCABULARY.index(name)


def load_stage_dataset(config: RunConfig, kind: str):
    d = dataset_dir(config)
    if not (d / "dataset.json").exists():
        raise ConfigError(f"no dataset at {d}; run `alphalatent gen-data` first")
    data = read_dataset(d)
    if data.kind != kind:
        raise ConfigError(f"need a {kind!r} dataset, found {data.kind!r} at {d}")
    return data


def save_stage_metrics(config: RunConfig, stage: str, rows: list[dict], resumed: bool) -> None:
    path = metrics_path(config, stage)
    if resumed and path.exists():
        rows = read_metrics_csv(path) + rows
    write_metrics_csv(path, rows)


# checkpoint load helpers ----------------------------------------------------


def load_base_model(config: RunConfig) -> tuple[FrozenAutoencoder, dict]:
    c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "base")), "base")
    ae = FrozenAutoencoder(base_channels=int(c.meta["base_channels"]))
    ckpt.load_module_blobs(ae, c.blobs, "model.")
    return ae.freeze(), c.meta


def load_codec_models(config: RunConfig):
    c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "codec")), "codec")
    bc = int(c.meta["base_channels"])
    enc = TransparencyEncoder(base_channels=bc)
    dec = TransparencyDecoder(base_channels=bc)
    disc = PatchDiscriminator(base_channels=bc)
    ckpt.load_module_blobs(enc, c.blobs, "enc.")
    ckpt.load_module_blobs(dec, c.blobs, "dec.")
    ckpt.load_module_blobs(disc, c.blobs, "disc.")
    for m in (enc, dec, disc):
        m.eval()
    return (enc, dec, disc), c.meta


def load_diffusion_model(config: RunConfig):
    c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "diffusion")), "diffusion")
    meta = c.meta
    model = ConditionalUNet(
        in_channels=int(meta["in_channels"]),
        base_channels=int(meta["model_channels"]),
        vocab_size=int(meta["vocab_size"]),
        tdim=int(meta["tdim"]),
    )
    ckpt.load_module_blobs(model, c.blobs, "model.")
    model.eval()
    schedule = make_schedule(
        int(meta["timesteps"]), float(meta["beta_start"]), float(meta["beta_end"]),
        kind=meta["schedule_kind"],
    )
    return model, schedule, meta


def load_adapters(config: RunConfig, base: ConditionalUNet):
    c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "layers")), "layers")
    targets = base.lora_targets()
    lora_f = LoRAWeights(targets, rank=int(c.meta["rank"]), role="foreground", seed=0)
    lora_b = LoRAWeights(targets, rank=int(c.meta["rank"]), role="background", seed=0)
    ckpt.load_module_blobs(lora_f, c.blobs, "fg.")
    ckpt.load_module_blobs(lora_b, c.blobs, "bg.")
    return (lora_f, lora_b), c.meta


# commands -------------------------------------------------------------------


def cmd_gen_data(config: RunConfig) -> int:
    d = dataset_dir(config)
    specs = sample_specs(config.count, config.master_seed, size=config.image_size)
    if config.kind == "transparent":
        samples = [TransparentSample(*gen_transparent_sample(s)) for s in specs]
    else:
        samples = [gen_layer_pair(s, erosion_radius=config.erosion_radius) for s in specs]
    write_dataset(d, samples, specs, config.master_seed, specs_digest(specs), config.shard_size)
    write_resolved(d / "resolved.config", config, "gen-data")
    print(f"wrote {len(samples)} {config.kind} samples to {d}")
    return 0


def _load_optimizer(opt: torch.optim.Optimizer, c: ckpt.Checkpoint, groups_key: str, prefix: str):
    ckpt.load_optimizer_blobs(opt, c.blobs, {"param_groups": c.meta[groups_key]}, prefix)


def _resume_guard(stage: str, start: int, total: int):
    if start >= total:
        raise ConfigError(
            f"{stage} checkpoint already at step {start}; raise --steps past it to resume"
        )


def _train_base_stage(config: RunConfig) -> None:
    data = load_stage_dataset(config, "transparent")
    images = [premultiply(s.image).rgb for s in data.items]
    path = ckpt_path(config, "base")
    start = 0
    # the fresh path mirrors the trainer's own construction recipe so a run
    # driven here matches one driven through the library call
    if config.resume:
        c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "base")), "base")
        if int(c.meta["base_channels"]) != config.base_channels:
            raise ConfigError("base_channels differs from the checkpoint; cannot resume")
        model = FrozenAutoencoder(base_channels=config.base_channels)
        ckpt.load_module_blobs(model, c.blobs, "model.")
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
        _load_optimizer(opt, c, "opt_groups", "opt.")
        start = int(c.meta["step"])
        _resume_guard("base", start, config.steps)
    else:
        torch.manual_seed(config.seed)
        model = FrozenAutoencoder(base_channels=config.base_channels)
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    cfg = BaseTrainConfig(
        steps=config.steps, batch_size=config.batch_size, lr=config.lr,
        seed=config.seed, base_channels=config.base_channels,
    )
    ae = train_base(images, cfg, model=model, opt=opt, start_step=start)
    blobs = ckpt.module_blobs(ae, "model.")
    opt_blobs, opt_meta = ckpt.optimizer_blobs(opt, "opt.")
    blobs.update(opt_blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(path, "base", config_digest(config), blobs, {
        "step": config.steps,
        "base_channels": config.base_channels,
        "image_size": data.meta["image_size"],
        "opt_groups": opt_meta["param_groups"],
    })
    save_stage_metrics(config, "base", cfg.metrics, resumed=start > 0)


def _train_codec_stage(config: RunConfig) -> None:
    data = load_stage_dataset(config, "transparent")
    ae, _ = load_base_model(config)
    images = [s.image for s in data.items]
    path = ckpt_path(config, "codec")
    start = 0
    baseline = None
    if config.resume:
        c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "codec")), "codec")
        if int(c.meta["base_channels"]) != config.base_channels:
            raise ConfigError("base_channels differs from the checkpoint; cannot resume")
        enc = TransparencyEncoder(base_channels=config.base_channels)
        dec = TransparencyDecoder(base_channels=config.base_channels)
        disc = PatchDiscriminator(base_channels=config.base_channels)
        ckpt.load_module_blobs(enc, c.blobs, "enc.")
        ckpt.load_module_blobs(dec, c.blobs, "dec.")
        ckpt.load_module_blobs(disc, c.blobs, "disc.")
        opt_g = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()), lr=config.lr)
        opt_d = torch.optim.AdamW(disc.parameters(), lr=config.disc_lr)
        _load_optimizer(opt_g, c, "gopt_groups", "gopt.")
        _load_optimizer(opt_d, c, "dopt_groups", "dopt.")
        start = int(c.meta["step"])
        baseline = float(c.meta["identity_baseline"])
        _resume_guard("codec", start, config.steps)
    else:
        torch.manual_seed(config.seed)
        enc = TransparencyEncoder(base_channels=config.base_channels)
        dec = TransparencyDecoder(base_channels=config.base_channels)
        disc = PatchDiscriminator(base_channels=config.base_channels)
        opt_g = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()), lr=config.lr)
        opt_d = torch.optim.AdamW(disc.parameters(), lr=config.disc_lr)
    cfg = CodecTrainConfig(
        steps=config.steps, batch_size=config.batch_size, lr=config.lr,
        disc_lr=config.disc_lr, seed=config.seed, base_channels=config.base_channels,
        lambda_offset=config.lambda_offset, lambda_recon=config.lambda_recon,
        lambda_identity=config.lambda_identity, lambda_disc=config.lambda_disc,
        disc_warmup=config.disc_warmup, offset_dropout=config.offset_dropout,
    )
    train_codec(
        images, ae, cfg,
        models=(enc, dec, disc), opts=(opt_g, opt_d),
        start_step=start, identity_baseline=baseline,
    )
    if baseline is None:
        baseline = cfg.metrics[0]["L_identity"]
    blobs = {}
    blobs.update(ckpt.module_blobs(enc, "enc."))
    blobs.update(ckpt.module_blobs(dec, "dec."))
    blobs.update(ckpt.module_blobs(disc, "disc."))
    g_blobs, g_meta = ckpt.optimizer_blobs(opt_g, "gopt.")
    d_blobs, d_meta = ckpt.optimizer_blobs(opt_d, "dopt.")
    blobs.update(g_blobs)
    blobs.update(d_blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(path, "codec", config_digest(config), blobs, {
        "step": config.steps,
        "base_channels": config.base_channels,
        "image_size": data.meta["image_size"],
        "lambda_offset": config.lambda_offset,
        "offset_dropout": config.offset_dropout,
        "identity_baseline": baseline,
        "gopt_groups": g_meta["param_groups"],
        "dopt_groups": d_meta["param_groups"],
    })
    save_stage_metrics(config, "codec", cfg.metrics, resumed=start > 0)


def _encode_dataset_latents(data, ae, enc, lambda_offset: float):
    latents = []
    labels = []
    for s in data.items:
        bundle = encode_adjusted(s.image, ae, enc, lambda_offset=lambda_offset)
        latents.append(bundle.x_a)
        labels.append(s.label)
    return torch.cat(latents, dim=0), torch.tensor(labels, dtype=torch.long)


def _diffusion_arch_meta(config: RunConfig, image_size, latent_scale: float) -> dict:
    return {
        "in_channels": 4,
        "model_channels": config.model_channels,
        "vocab_size": len(VOCABULARY),
        "tdim": 4 * config.model_channels,
        "timesteps": config.timesteps,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
        "schedule_kind": config.schedule_kind,
        "image_size": image_size,
        "latent_scale": latent_scale,
    }


def _save_diffusion(path: Path, config: RunConfig, model, opt, step: int, arch: dict) -> None:
    blobs = ckpt.module_blobs(model, "model.")
    opt_blobs, opt_meta = ckpt.optimizer_blobs(opt, "opt.")
    blobs.update(opt_blobs)
    meta = dict(arch)
    meta["step"] = step
    meta["opt_groups"] = opt_meta["param_groups"]
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(path, "diffusion", config_digest(config), blobs, meta)


def _train_diffusion_stage(config: RunConfig) -> None:
    data = load_stage_dataset(config, "transparent")
    ae, _ = load_base_model(config)
    (enc, _, _), codec_meta = load_codec_models(config)
    # the offset scale baked into the codec is authoritative for every
    # stage downstream of it
    latents, labels = _encode_dataset_latents(data, ae, enc, float(codec_meta["lambda_offset"]))
    # The offset term makes adjusted latents much wider than the unit-scale
    # noise the sampler starts from; the model trains on normalized latents
    # and every consumer multiplies samples back by this scale.
    latent_scale = float(latents.std()) or 1.0
    latents = latents / latent_scale
    schedule = make_schedule(
        config.timesteps, config.beta_start, config.beta_end, kind=config.schedule_kind
    )
    arch = _diffusion_arch_meta(config, data.meta["image_size"], latent_scale)
    path = ckpt_path(config, "diffusion")
    start = 0
    if config.resume:
        c = ckpt.expect_module(
            ckpt.load_checkpoint(require_checkpoint(config, "diffusion")), "diffusion"
        )
        for key in ("model_channels", "timesteps", "schedule_kind"):
            if c.meta[key] != arch[key]:
                raise ConfigError(f"{key} differs from the checkpoint; cannot resume")
        if float(c.meta["latent_scale"]) != latent_scale:
            raise ConfigError("dataset latents differ from the checkpoint; cannot resume")
        model = ConditionalUNet(
            in_channels=4, base_channels=config.model_channels,
            vocab_size=len(VOCABULARY), tdim=4 * config.model_channels,
        )
        ckpt.load_module_blobs(model, c.blobs, "model.")
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
        _load_optimizer(opt, c, "opt_groups", "opt.")
        start = int(c.meta["step"])
        _resume_guard("diffusion", start, config.steps)
    else:
        torch.manual_seed(config.seed)
        model = ConditionalUNet(
            in_channels=4, base_channels=config.model_channels,
            vocab_size=len(VOCABULARY), tdim=4 * config.model_channels,
        )
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    cfg = DiffusionTrainConfig(
        steps=config.steps, batch_size=config.batch_size, lr=config.lr,
        seed=config.seed, base_channels=config.model_channels,
        checkpoint_every=config.checkpoint_every,
        on_checkpoint=lambda step, m, o: _save_diffusion(path, config, m, o, step, arch),
    )
    train_diffusion(latents, labels, model, schedule, cfg, opt=opt, start_step=start)
    _save_diffusion(path, config, model, opt, config.steps, arch)
    save_stage_metrics(config, "diffusion", cfg.metrics, resumed=start > 0)


def _save_layers(path: Path, config: RunConfig, lora_f, lora_b, opt, step: int) -> None:
    blobs = {}
    blobs.update(ckpt.module_blobs(lora_f, "fg."))
    blobs.update(ckpt.module_blobs(lora_b, "bg."))
    opt_blobs, opt_meta = ckpt.optimizer_blobs(opt, "opt.")
    blobs.update(opt_blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(path, "layers", config_digest(config), blobs, {
        "step": step,
        "rank": config.rank,
        "mode": config.mode,
        "share": config.share,
        "opt_groups": opt_meta["param_groups"],
    })


def _train_layers_stage(config: RunConfig) -> None:
    data = load_stage_dataset(config, "layers")
    ae, _ = load_base_model(config)
    (enc, _, _), codec_meta = load_codec_models(config)
    base, schedule, dmeta = load_diffusion_model(config)
    prepped = prepare_layer_latents(
        data.items, ae, enc, lambda_offset=float(codec_meta["lambda_offset"])
    )
    # adapters run over the frozen base, so they see its latent convention
    scale = float(dmeta["latent_scale"])
    prepped = LayerLatents(
        x_f=prepped.x_f / scale, x_b=prepped.x_b / scale, labels=prepped.labels
    )
    path = ckpt_path(config, "layers")
    targets = base.lora_targets()
    start = 0
    if config.resume:
        c = ckpt.expect_module(ckpt.load_checkpoint(require_checkpoint(config, "layers")), "layers")
        if int(c.meta["rank"]) != config.rank:
            raise ConfigError("rank differs from the checkpoint; cannot resume")
        lora_f = LoRAWeights(targets, rank=config.rank, role="foreground", seed=0)
        lora_b = LoRAWeights(targets, rank=config.rank, role="background", seed=0)
        ckpt.load_module_blobs(lora_f, c.blobs, "fg.")
        ckpt.load_module_blobs(lora_b, c.blobs, "bg.")
        opt = torch.optim.AdamW(
            list(lora_f.parameters()) + list(lora_b.parameters()), lr=config.lr
        )
        _load_optimizer(opt, c, "opt_groups", "opt.")
        start = int(c.meta["step"])
        _resume_guard("layers", start, config.steps)
    else:
        lora_f = LoRAWeights(targets, rank=config.rank, role="foreground", seed=config.seed * 2 + 1)
        lora_b = LoRAWeights(targets, rank=config.rank, role="background", seed=config.seed * 2 + 2)
        opt = torch.optim.AdamW(
            list(lora_f.parameters()) + list(lora_b.parameters()), lr=config.lr
        )
    cfg = LayerTrainConfig(
        steps=config.steps, batch_size=config.batch_size, lr=config.lr,
        rank=config.rank, seed=config.seed, mode=config.mode, share=config.share,
        checkpoint_every=config.checkpoint_every,
        on_checkpoint=lambda step, f, b, o: _save_layers(path, config, f, b, o, step),
    )
    train_layers(prepped, base, schedule, cfg, adapters=(lora_f, lora_b), opt=opt, start_step=start)
    _save_layers(path, config, lora_f, lora_b, opt, config.steps)
    save_stage_metrics(config, "layers", cfg.metrics, resumed=start > 0)


_STAGE_RUNNERS = {
    "base": _train_base_stage,
    "codec": _train_codec_stage,
    "diffusion": _train_diffusion_stage,
    "layers": _train_layers_stage,
}

# each stage consumes the previous stage's checkpoint, so ordering errors
# surface as missing-prerequisite messages naming the stage to run
_STAGE_PREREQS = {
    "base": (),
    "codec": ("base",),
    "diffusion": ("base", "codec"),
    "layers": ("base", "codec", "diffusion"),
}


def cmd_train(config: RunConfig, stage: str) -> int:
    config = replace(config, stage=stage, steps=resolve_steps(config, stage))
    for prereq in _STAGE_PREREQS[stage]:
        require_checkpoint(config, prereq)
    write_resolved(checkpoints_dir(config) / f"{stage}.config", config, f"train {stage}")
    _STAGE_RUNNERS[stage](config)
    print(f"trained {stage} to step {config.steps}; checkpoint {ckpt_path(config, stage)}")
    print(f"metrics {metrics_path(config, stage)}")
    return 0


def _save_transparent(stem: Path, img, background: np.ndarray) -> list[Path]:
    paths = [
        Path(f"{stem}.rgb.png"),
        Path(f"{stem}.alpha.png"),
        Path(f"{stem}.rgba.png"),
        Path(f"{stem}.composite.png"),
    ]
    save_rgb(paths[0], img.rgb)
    save_gray(paths[1], img.alpha)
    save_rgba(paths[2], img)
    save_rgb(paths[3], alpha_blend(img, background))
    return paths


def _decode_opaque(ae: FrozenAutoencoder, latent: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        rgb = ae.decode(latent)
    return np.clip(batch_to_hwc(rgb)[0], -1.0, 1.0)


def cmd_generate(config: RunConfig) -> int:
    ae, _ = load_base_model(config)
    (enc, dec, _), codec_meta = load_codec_models(config)
    model, schedule, dmeta = load_diffusion_model(config)
    lam = float(codec_meta["lambda_offset"])
    image_size = int(dmeta["image_size"])
    scale = float(dmeta["latent_scale"])
    hw = image_size // 4
    label = parse_label(config.label)
    out_dir = out_root(config) / "samples" / config.name
    out_dir.mkdir(parents=True, exist_ok=True)
    white = np.ones((image_size, image_size, 3), dtype=np.float32)
    wrote = 0

    if config.gen_mode == "single":
        for i in range(config.n_samples):
            x_a = sample(
                model, label, schedule, sampler=config.sampler,
                steps=config.sample_steps, seed=config.seed + i, shape=(1, 4, hw, hw),
            )
            img = decode_adjusted(x_a * scale, ae, dec)
            _save_transparent(out_dir / f"sample_{i:03d}", img, white)
            wrote += 1
    elif config.gen_mode == "joint":
        (lora_f, lora_b), _ = load_adapters(config, model)
        for i in range(config.n_samples):
            x_f, x_b = sample_joint(
                model, lora_f, lora_b, label, schedule, sampler=config.sampler,
                steps=config.sample_steps, seed=config.seed + i,
                shape=(1, 4, hw, hw), share=config.share,
            )
            img = decode_adjusted(x_f * scale, ae, dec)
            bg = _decode_opaque(ae, x_b * scale)
            stem = out_dir / f"sample_{i:03d}"
            _save_transparent(stem, img, bg)
            save_rgb(f"{stem}.bg.png", bg)
            wrote += 1
    elif config.gen_mode in ("fg-cond", "bg-cond"):
        (lora_f, lora_b), _ = load_adapters(config, model)
        data = load_stage_dataset(config, "layers")
        if config.cond_index >= len(data.items):
            raise ConfigError(
                f"cond_index {config.cond_index} out of range for {len(data.items)} samples"
            )
        pair = data.items[config.cond_index]
        for i in range(config.n_samples):
            stem = out_dir / f"sample_{i:03d}"
            if config.gen_mode == "fg-cond":
                clean = encode_adjusted(pair.foreground, ae, enc, lambda_offset=lam).x_a / scale
                x_b = sample_conditional(
                    model, lora_f, lora_b, "foreground", clean, label, schedule,
                    sampler=config.sampler, steps=config.sample_steps,
                    seed=config.seed + i, share=config.share,
                )
                bg = _decode_opaque(ae, x_b * scale)
                save_rgb(f"{stem}.bg.png", bg)
                save_rgb(f"{stem}.composite.png", alpha_blend(pair.foreground, bg))
            else:
                with torch.no_grad():
                    clean, _ = ae.encode(hwc_to_batch([pair.background]))
                x_f = sample_conditional(
                    model, lora_f, lora_b, "background", clean / scale, label, schedule,
                    sampler=config.sampler, steps=config.sample_steps,
                    seed=config.seed + i, share=config.share,
                )
                img = decode_adjusted(x_f * scale, ae, dec)
                _save_transparent(stem, img, pair.background)
            wrote += 1
    else:  # iterate
        (lora_f, lora_b), _ = load_adapters(config, model)
        names = [p.strip() for p in config.prompts.split(",") if p.strip()]
        labels = [parse_label(n) for n in names] if names else [label] * config.layers_n
        stack = iterate_layers(
            labels, model, lora_f, lora_b, ae, dec, schedule,
            sampler=config.sampler, steps=config.sample_steps, seed=config.seed,
            image_size=image_size, share=config.share, latent_scale=scale,
        )
        for j, (layer, condition) in enumerate(zip(stack.layers, stack.conditions)):
            save_rgba(out_dir / f"layer_{j:02d}.rgba.png", layer)
            save_gray(out_dir / f"layer_{j:02d}.alpha.png", layer.alpha)
            save_rgb(out_dir / f"condition_{j:02d}.png", condition)
            wrote += 1
        save_rgb(out_dir / "final.png", compose_stack(stack.layers, white))

    write_resolved(out_dir / "resolved.config", config, "generate")
    print(f"wrote {wrote} {config.gen_mode} samples to {out_dir}")
    return 0


def evaluate_codec(images, ae, enc, dec, lambda_offset: float) -> dict:
    """Reconstruction metrics over straight-alpha images: alpha MAE in [0, 1]
    units, RGB MSE against the padded target in [-1, 1] units, and the PSNR
    cost of the offset on the frozen decode (base minus adjusted)."""
    alpha_err, rgb_err, mse_x, mse_xa = [], [], [], []
    for img in images:
        bundle = encode_adjusted(img, ae, enc, lambda_offset=lambda_offset)
        rec = decode_adjusted(bundle.x_a, ae, dec)
        alpha_err.append(float(np.abs(rec.alpha - img.alpha).mean()))
        target = pad_undefined(img).rgb
        rgb_err.append(float(((rec.rgb - target) ** 2).mean()))
        premult = hwc_to_batch([premultiply(img).rgb])
        with torch.no_grad():
            mse_x.append(float(F.mse_loss(ae.decode(bundle.x), premult)))
            mse_xa.append(float(F.mse_loss(ae.decode(bundle.x_a), premult)))

    def psnr(mse: float) -> float:
        return 10.0 * math.log10(4.0 / max(mse, 1e-12))  # peak-to-peak 2.0

    psnr_base = psnr(float(np.mean(mse_x)))
    psnr_adjusted = psnr(float(np.mean(mse_xa)))
    return {
        "count": len(images),
        "alpha_mae": float(np.mean(alpha_err)),
        "rgb_mse": float(np.mean(rgb_err)),
        "psnr_base": psnr_base,
        "psnr_adjusted": psnr_adjusted,
        "psnr_delta": psnr_base - psnr_adjusted,
    }


def cmd_eval(config: RunConfig) -> int:
    ae, _ = load_base_model(config)
    (enc, dec, _), codec_meta = load_codec_models(config)
    data = load_stage_dataset(config, "transparent")
    n = min(config.eval_count, len(data.items))
    report = evaluate_codec(
        [s.image for s in data.items[:n]], ae, enc, dec,
        lambda_offset=float(codec_meta["lambda_offset"]),
    )
    checks = [
        ("alpha_mae", config.gate_alpha_mae, report["alpha_mae"]),
        ("rgb_mse", config.gate_rgb_mse, report["rgb_mse"]),
        ("psnr_delta", config.gate_psnr_delta, report["psnr_delta"]),
    ]
    report["gates"] = {
        name: {"limit": gate, "value": value, "passed": value <= gate}
        for name, gate, value in checks
        if gate >= 0
    }
    eval_dir = out_root(config) / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / f"{config.name}.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    write_resolved(eval_dir / f"{config.name}.config", config, "eval")
    for key in ("count", "alpha_mae", "rgb_mse", "psnr_base", "psnr_adjusted", "psnr_delta"):
        print(f"{key}={format_value(report[key])}")
    failures = [
        f"{name} {value:.6g} exceeds gate {gate:.6g}"
        for name, gate, value in checks
        if gate >= 0 and value > gate
    ]
    if failures:
        raise GateFailure("; ".join(failures))
    print(f"report {eval_dir / (config.name + '.json')}")
    return 0


# entry ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alphalatent",
        description="Transparent-image pipeline: synthetic data, staged training, "
        "sampling, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate a synthetic dataset of transparent samples or layer pairs",
        "train": "train one pipeline stage (prerequisites checked)",
        "generate": "sample images from trained checkpoints",
        "eval": "measure codec reconstruction quality, optionally gated",
    }
    for name in ("gen-data", "train", "generate", "eval"):
        sp = sub.add_parser(name, help=helps[name])
        if name == "train":
            sp.add_argument("stage", choices=list(STAGES))
        sp.add_argument("--config", default=None, metavar="FILE", help="key=value config file")
        sp.add_argument(
            "--paper-defaults", action="store_true",
            help="start from production-scale constants (lr 1e-5, rank 256, "
            "erosion 8, size 512) instead of the toy defaults",
        )
        for f in fields(RunConfig):
            if f.name == "stage":
                continue
            extra = {"nargs": "?", "const": "true"} if isinstance(f.default, bool) else {}
            sp.add_argument(
                "--" + f.name.replace("_", "-"),
                dest="cfg_" + f.name,
                default=None,
                metavar="V",
                help=f"override {f.name} (default {format_value(f.default)})",
                **extra,
            )
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    import os

    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, "cfg_" + f.name, None)
        if value is not None:
            overrides[f.name] = value
    file_text = None
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        file_text = path.read_text()
    return make_config(
        file_text=file_text,
        overrides=overrides,
        paper_defaults=args.paper_defaults,
        env=dict(os.environ),
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)  # the fixed execution mode the repro contract pins
    try:
        config = _config_from_args(args)
        if args.command == "train":
            return cmd_train(config, args.stage)
        commands = {"gen-data": cmd_gen_data, "generate": cmd_generate, "eval": cmd_eval}
        return commands[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ShardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    main()
