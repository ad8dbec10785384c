"""Versioned binary checkpoint container shared by all training stages.

Layout: magic "LTCKPT", u32 format version, module name, config digest, a
JSON metadata section (step counters, optimizer param groups), then named
numpy blobs (name, dtype, shape, raw bytes). Blob names are written sorted so
identical contents always produce identical files.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

_MAGIC = b"LTCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    module: str
    config_digest: str
    blobs: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _write_str(f, s: str) -> None:
    data = s.encode()
    f.write(struct.pack("<H", len(data)))
    f.write(data)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    return _read_exact(f, n).decode()


def save_checkpoint(
    path: str | Path,
    module: str,
    config_digest: str,
    blobs: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, module)
    _write_str(buf, config_digest)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() already emits C order for any layout
        arr = np.asarray(blobs[name])
        _write_str(buf, name)
        _write_str(buf, str(arr.dtype))
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        with open(path, "rb") as f:
            if _read_exact(f, len(_MAGIC)) != _MAGIC:
                raise CheckpointError(f"{path}: bad magic")
            (version,) = struct.unpack("<I", _read_exact(f, 4))
            if version > VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            module = _read_str(f)
            digest = _read_str(f)
            (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
            meta = json.loads(_read_exact(f, meta_len))
            (count,) = struct.unpack("<I", _read_exact(f, 4))
            blobs = {}
            for _ in range(count):
                name = _read_str(f)
                dtype = np.dtype(_read_str(f))
                (ndim,) = struct.unpack("<B", _read_exact(f, 1))
                shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
                (nbytes,) = struct.unpack("<Q", _read_exact(f, 8))
                blobs[name] = np.frombuffer(_read_exact(f, nbytes), dtype=dtype).reshape(shape).copy()
    except (struct.error, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc
    return Checkpoint(module=module, config_digest=digest, blobs=blobs, meta=meta, version=version)


def expect_module(ckpt: Checkpoint, module: str) -> Checkpoint:
    if ckpt.module != module:
        raise CheckpointError(f"checkpoint is for {ckpt.module!r}, expected {module!r}")
    return ckpt


def module_blobs(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        prefix + name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    # np.array, not np.ascontiguousarray: the latter promotes 0-d arrays to
    # 1-d, which would change the shape of optimizer step scalars
    return torch.from_numpy(np.array(arr, copy=True))


def load_module_blobs(module: torch.nn.Module, blobs: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {
        name[len(prefix):]: _to_tensor(arr)
        for name, arr in blobs.items()
        if name.startswith(prefix)
    }
    module.load_state_dict(state)


def optimizer_blobs(opt: torch.optim.Optimizer, prefix: str = "opt.") -> tuple[dict[str, np.ndarray], dict]:
    """Flatten optimizer moment tensors into named blobs; param groups (plain
    JSON data) go into the returned meta fragment."""
    sd = opt.state_dict()
    blobs = {}
    for pid, state in sd["state"].items():
        for key, val in state.items():
            arr = val.detach().cpu().numpy() if isinstance(val, torch.Tensor) else np.asarray(val)
            blobs[f"{prefix}{pid}.{key}"] = arr.copy()
    return blobs, {"param_groups": sd["param_groups"]}


def load_optimizer_blobs(
    opt: torch.optim.Optimizer,
    blobs: dict[str, np.ndarray],
    meta: dict,
    prefix: str = "opt.",
) -> None:
    state: dict[int, dict] = {}
    for name, arr in blobs.items():
        if not name.startswith(prefix):
            continue
        pid_str, key = name[len(prefix):].split(".", 1)
        state.setdefault(int(pid_str), {})[key] = _to_tensor(arr)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
