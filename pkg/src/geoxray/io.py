"""Deterministic artifact emission: CSV tables, 16-bit PGM images, and
plain-text reports.

Floats are written with shortest round-trip formatting, so identical
inputs yield byte-identical files; every CSV carries a header row and a
trailing comment line with the configuration hash.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = [
    "write_csv",
    "read_csv",
    "write_pgm",
    "write_text",
]


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows, *, config_hash: str = "") -> Path:
    """UTF-8 comma-separated table: one header row, data rows, and a
    trailing ``# config <hash>`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        fh.write(f"# config {config_hash}\n")
    return path


def read_csv(path) -> tuple[list[str], list[list[str]], str]:
    """Inverse of write_csv at the string level: header, rows, comment."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    comment = ""
    if lines and lines[-1].startswith("#"):
        comment = lines.pop()
    reader = csv.reader(lines)
    parsed = [row for row in reader]
    if not parsed:
        raise ValueError(f"{path} has no header row")
    return parsed[0], parsed[1:], comment


def write_pgm(path, values: np.ndarray, *, maxval: int = 65535,
              config_hash: str = "") -> Path:
    """Plain-text (P2) PGM of a scalar field, full range scaled to maxval.

    The array convention is x index first; image rows run from the top of
    the y axis downward so the picture matches the mathematical layout.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 2:
        raise ValueError("PGM output needs a 2D array")
    vmin = float(vals.min())
    vmax = float(vals.max())
    if vmax > vmin:
        levels = np.rint((vals - vmin) / (vmax - vmin) * maxval)
    else:
        levels = np.zeros_like(vals)
    img = levels.astype(np.int64).T[::-1]
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("P2\n")
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        fh.write(f"# range {vmin!r} {vmax!r}\n")
        fh.write(f"{img.shape[1]} {img.shape[0]}\n{maxval}\n")
        for row in img:
            fh.write(" ".join(str(v) for v in row))
            fh.write("\n")
    return path


def write_text(path, lines) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in lines:
            fh.write(f"{line}\n")
    return path
