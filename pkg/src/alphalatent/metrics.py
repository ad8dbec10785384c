"""Training metrics as deterministic CSV: floats are written with repr so a
rerun with identical values reproduces the file byte for byte, and reading
parses them back exactly."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def _format_cell(value) -> str:
    text = repr(value) if isinstance(value, float) else str(value)
    if "," in text or "\n" in text:
        raise ValueError(f"metrics cell {text!r} would corrupt the CSV")
    return text


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("refusing to write an empty metrics CSV")
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        if list(row.keys()) != header:
            raise ValueError("metrics rows disagree on columns")
        lines.append(",".join(_format_cell(row[key]) for key in header))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _parse_cell(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_metrics_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such metrics file")
    lines = path.read_text().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty metrics file")
    header = lines[0].split(",")
    return [dict(zip(header, (_parse_cell(c) for c in line.split(",")))) for line in lines[1:]]
