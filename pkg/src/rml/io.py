"""CSV and checksum helpers for experiment artifacts."""

from __future__ import annotations

import csv
import hashlib
import io
from pathlib import Path

import numpy as np


def format_value(v) -> str:
    """Floats at 9 significant digits; everything else via str."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(columns, rows) -> str:
    """Comma-delimited text with a header; rows are dicts or sequences."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        values = [r[c] for c in columns] if isinstance(r, dict) else list(r)
        if len(values) != len(columns):
            raise ValueError(f"row has {len(values)} fields, header has {len(columns)}")
        w.writerow([format_value(v) for v in values])
    return buf.getvalue()


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.write_text(csv_text(columns, rows), encoding="utf-8")
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
