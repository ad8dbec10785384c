"""Dataset persistence: binary shards of concatenated PNG blobs with a
per-record index, plus a line-delimited manifest and a dataset summary.

Layout of a dataset directory:
    dataset.json    summary (kind, count, master seed, spec digest, image size)
    manifest.jsonl  one record per sample: id, seed, labels, shard, checksum
    shard-NNNN.bin  binary shard (see _MAGIC header below)

A shard holds, per record: record id, then a list of PNG blobs. Transparent
samples store one RGBA blob; layer pairs store the foreground RGBA and the
background RGB. Blended composites are recomputed on read, so the invariant
`pair.blended == alpha_blend(pair.foreground, pair.background)` always holds.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

from . import pngio
from .data import LayerPair, SampleSpec
from .errors import ShardError
from .pixels import TransparentImage, alpha_blend

_MAGIC = b"LTSHARD1"


@dataclass(frozen=True)
class TransparentSample:
    image: TransparentImage
    label: int


def _record_bytes(rec_id: int, blobs: list[bytes]) -> bytes:
    parts = [struct.pack("<II", rec_id, len(blobs))]
    for blob in blobs:
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def _checksum(blobs: list[bytes]) -> str:
    h = hashlib.sha256()
    for blob in blobs:
        h.update(blob)
    return h.hexdigest()


def write_shard(path: Path, records: list[tuple[int, list[bytes]]]) -> None:
    payloads = [_record_bytes(rec_id, blobs) for rec_id, blobs in records]
    header_size = len(_MAGIC) + 4 + 8 * len(payloads)
    offsets = []
    pos = header_size
    for p in payloads:
        offsets.append(pos)
        pos += len(p)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(payloads)))
        f.write(struct.pack(f"<{len(offsets)}Q", *offsets))
        for p in payloads:
            f.write(p)


def read_shard(path: Path) -> list[tuple[int, list[bytes]]]:
    data = path.read_bytes()
    if len(data) < len(_MAGIC) + 4 or data[: len(_MAGIC)] != _MAGIC:
        raise ShardError(f"{path}: not a shard file")
    (count,) = struct.unpack_from("<I", data, len(_MAGIC))
    offsets = struct.unpack_from(f"<{count}Q", data, len(_MAGIC) + 4)
    records = []
    for off in offsets:
        try:
            rec_id, n_blobs = struct.unpack_from("<II", data, off)
            pos = off + 8
            blobs = []
            for _ in range(n_blobs):
                (blen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                blob = data[pos : pos + blen]
                if len(blob) != blen:
                    raise ShardError(f"{path}: truncated record {rec_id}")
                blobs.append(blob)
                pos += blen
        except struct.error as exc:
            raise ShardError(f"{path}: corrupt record table") from exc
        records.append((rec_id, blobs))
    return records


def _sample_blobs(sample: TransparentSample | LayerPair) -> list[bytes]:
    if isinstance(sample, TransparentSample):
        return [pngio.encode_png(sample.image)]
    return [
        pngio.encode_png(sample.foreground),
        pngio.encode_rgb_png(sample.background),
    ]


def write_dataset(
    out_dir: Path,
    samples: list[TransparentSample] | list[LayerPair],
    specs: list[SampleSpec],
    master_seed: int,
    spec_digest: str,
    shard_size: int = 512,
) -> None:
    if len(samples) != len(specs):
        raise ValueError("one spec per sample required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = "layers" if samples and isinstance(samples[0], LayerPair) else "transparent"

    manifest_lines = []
    shard_paths = []
    for start in range(0, len(samples), shard_size):
        shard_name = f"shard-{start // shard_size:04d}.bin"
        records = []
        for i in range(start, min(start + shard_size, len(samples))):
            blobs = _sample_blobs(samples[i])
            records.append((i, blobs))
            labels = (
                list(samples[i].labels)
                if isinstance(samples[i], LayerPair)
                else [samples[i].label]
            )
            manifest_lines.append(
                json.dumps(
                    {
                        "id": i,
                        "seed": specs[i].seed,
                        "labels": labels,
                        "shard": shard_name,
                        "checksum": _checksum(blobs),
                    },
                    sort_keys=True,
                )
            )
        write_shard(out_dir / shard_name, records)
        shard_paths.append(shard_name)

    (out_dir / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n")
    (out_dir / "dataset.json").write_text(
        json.dumps(
            {
                "kind": kind,
                "count": len(samples),
                "master_seed": master_seed,
                "spec_digest": spec_digest,
                "image_size": specs[0].size if specs else 0,
                "shards": shard_paths,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )


@dataclass(frozen=True)
class Dataset:
    kind: str
    items: list
    meta: dict
    manifest: list[dict]


def read_dataset(in_dir: Path) -> Dataset:
    in_dir = Path(in_dir)
    meta_path = in_dir / "dataset.json"
    if not meta_path.exists():
        raise ShardError(f"{in_dir}: missing dataset.json")
    meta = json.loads(meta_path.read_text())
    manifest = [json.loads(line) for line in (in_dir / "manifest.jsonl").read_text().splitlines()]
    if len(manifest) != meta["count"]:
        raise ShardError(f"{in_dir}: manifest count {len(manifest)} != {meta['count']}")

    by_shard: dict[str, dict[int, list[bytes]]] = {}
    for name in meta["shards"]:
        by_shard[name] = dict(read_shard(in_dir / name))

    items = []
    for row in manifest:
        blobs = by_shard.get(row["shard"], {}).get(row["id"])
        if blobs is None:
            raise ShardError(f"{in_dir}: record {row['id']} missing from {row['shard']}")
        if _checksum(blobs) != row["checksum"]:
            raise ShardError(f"{in_dir}: checksum mismatch for record {row['id']}")
        if meta["kind"] == "transparent":
            items.append(TransparentSample(pngio.decode_png(blobs[0]), row["labels"][0]))
        else:
            fg = pngio.decode_png(blobs[0])
            bg = pngio.decode_rgb_png(blobs[1])
            items.append(
                LayerPair(
                    foreground=fg,
                    background=bg,
                    blended=alpha_blend(fg, bg),
                    labels=tuple(row["labels"]),
                )
            )
    return Dataset(kind=meta["kind"], items=items, meta=meta, manifest=manifest)
