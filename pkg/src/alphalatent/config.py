"""Run configuration shared by every command: typed defaults, key=value
config-file parsing, flag and environment overrides, and the resolved-config
text persisted beside each command's outputs.

A resolved-config file is itself a valid config file, so any run can be
repeated by feeding it back through --config.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError

STAGES = ("base", "codec", "diffusion", "layers")
DATASET_KINDS = ("transparent", "layers")
GENERATE_MODES = ("single", "joint", "fg-cond", "bg-cond", "iterate")

# 0 in `steps` means "use the stage default"
STAGE_STEPS = {"base": 2000, "codec": 5000, "diffusion": 3000, "layers": 600}

# production-scale values retained for reference; the toy defaults below
# target a single CPU. --paper-defaults applies these before other sources.
PAPER_PRESET = {
    "lr": "1e-5",
    "rank": "256",
    "erosion_radius": "8",
    "image_size": "512",
}


@dataclass(frozen=True)
class RunConfig:
    # paths
    out: str = "runs"
    dataset: str = ""  # empty -> <out>/data/<name>
    checkpoints: str = ""  # empty -> <out>/checkpoints
    name: str = "default"
    stage: str = ""  # set by the train command's positional argument
    # dataset generation
    kind: str = "transparent"
    count: int = 256
    image_size: int = 64
    master_seed: int = 0
    erosion_radius: int = 2
    shard_size: int = 512
    # training, all stages
    steps: int = 0
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    base_channels: int = 32
    resume: bool = False
    checkpoint_every: int = 0
    # codec stage
    disc_lr: float = 1e-4
    lambda_offset: float = 100.0
    lambda_recon: float = 1.0
    lambda_identity: float = 1.0
    lambda_disc: float = 0.01
    disc_warmup: int = 2000
    offset_dropout: float = 0.0
    # diffusion stage
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    schedule_kind: str = "linear"
    model_channels: int = 48
    # layers stage
    rank: int = 8
    mode: str = "joint"
    share: bool = True
    # sampling
    sampler: str = "ddim"
    sample_steps: int = 50
    label: str = "disk"
    gen_mode: str = "single"
    n_samples: int = 4
    layers_n: int = 2
    prompts: str = ""  # comma-separated label names for gen_mode=iterate
    cond_index: int = 0  # dataset row supplying the clean latent
    # evaluation
    eval_count: int = 64
    gate_alpha_mae: float = -1.0  # negative disables the gate
    gate_rgb_mse: float = -1.0
    gate_psnr_delta: float = -1.0


_FIELD_TYPES = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw) -> object:
    kind = _FIELD_TYPES[key]
    text = str(raw).strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return text


def parse_kv_lines(text: str) -> dict[str, str]:
    """Line-oriented key=value parser; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def apply_values(config: RunConfig, values: dict[str, str]) -> RunConfig:
    updates = {}
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw)
    merged = {f.name: getattr(config, f.name) for f in fields(RunConfig)}
    merged.update(updates)
    return RunConfig(**merged)


def validate_config(config: RunConfig) -> RunConfig:
    def require(ok: bool, message: str):
        if not ok:
            raise ConfigError(message)

    require(config.stage in ("",) + STAGES, f"unknown stage {config.stage!r}")
    require(config.kind in DATASET_KINDS, f"unknown dataset kind {config.kind!r}")
    require(config.count > 0, "count must be positive")
    require(
        config.image_size >= 16 and config.image_size % 16 == 0,
        "image_size must be a positive multiple of 16",
    )
    require(config.erosion_radius >= 0, "erosion_radius must be >= 0")
    require(config.shard_size > 0, "shard_size must be positive")
    require(config.steps >= 0, "steps must be >= 0")
    require(config.batch_size > 0, "batch_size must be positive")
    require(config.lr > 0, "lr must be positive")
    require(config.disc_lr > 0, "disc_lr must be positive")
    require(config.base_channels > 0, "base_channels must be positive")
    require(config.checkpoint_every >= 0, "checkpoint_every must be >= 0")
    require(0.0 <= config.offset_dropout < 1.0, "offset_dropout must be in [0, 1)")
    require(config.disc_warmup >= 0, "disc_warmup must be >= 0")
    require(config.timesteps >= 1, "timesteps must be >= 1")
    require(
        config.schedule_kind in ("linear", "cosine"),
        f"unknown schedule_kind {config.schedule_kind!r}",
    )
    require(config.model_channels > 0, "model_channels must be positive")
    require(config.rank > 0, "rank must be positive")
    require(config.mode in ("joint", "fg-cond", "bg-cond"), f"unknown mode {config.mode!r}")
    require(config.sampler in ("ddpm", "ddim"), f"unknown sampler {config.sampler!r}")
    require(config.sample_steps >= 1, "sample_steps must be >= 1")
    require(config.gen_mode in GENERATE_MODES, f"unknown gen_mode {config.gen_mode!r}")
    require(config.n_samples > 0, "n_samples must be positive")
    require(config.layers_n >= 1, "layers_n must be >= 1")
    require(config.cond_index >= 0, "cond_index must be >= 0")
    require(config.eval_count > 0, "eval_count must be positive")
    return config


def make_config(
    file_text: str | None = None,
    overrides: dict[str, str] | None = None,
    paper_defaults: bool = False,
    env: dict | None = None,
) -> RunConfig:
    """Resolve one configuration. Precedence, lowest to highest: dataclass
    defaults, --paper-defaults preset, config file, LTL_OUT (output root
    only), explicit flag overrides."""
    values: dict[str, str] = {}
    if paper_defaults:
        values.update(PAPER_PRESET)
    if file_text is not None:
        values.update(parse_kv_lines(file_text))
    env = env or {}
    if env.get("LTL_OUT"):
        values["out"] = env["LTL_OUT"]
    if overrides:
        values.update({k: str(v) for k, v in overrides.items()})
    return validate_config(apply_values(RunConfig(), values))


def resolve_steps(config: RunConfig, stage: str) -> int:
    return config.steps if config.steps > 0 else STAGE_STEPS[stage]


def format_resolved(config: RunConfig, command: str) -> str:
    """Full key=value dump, defaults included. The leading comment names the
    command; the body parses back through parse_kv_lines unchanged."""
    lines = [f"# resolved configuration for: {command}"]
    for f in fields(RunConfig):
        lines.append(f"{f.name}={format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


_PATH_FIELDS = ("out", "dataset", "checkpoints", "name")


def config_digest(config: RunConfig) -> str:
    """Fingerprint of the hyperparameters only. Path fields are excluded so
    the same logical run produces identical artifacts wherever it lands."""
    body = "\n".join(
        f"{f.name}={format_value(getattr(config, f.name))}"
        for f in fields(RunConfig)
        if f.name not in _PATH_FIELDS
    )
    return hashlib.sha256(body.encode()).hexdigest()
