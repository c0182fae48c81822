"""CSV conventions shared by every artifact.

Files start with one ``#`` comment line (config hash, master seed and any
extra ``key=value`` pairs), then a header row, then data. Floats are written
with ``repr`` so they parse back bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

NA = "NA"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return NA if math.isnan(v) else repr(v)
    return str(v)


def comment_line(**fields) -> str:
    return "# " + " ".join(f"{k}={format_value(v)}" for k, v in fields.items())


def write_rows(path, columns, rows, comment: str = "") -> None:
    """Write rows of mixed values; the write is atomic (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        if comment:
            fh.write(comment if comment.startswith("#") else "# " + comment)
            fh.write("\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    os.replace(tmp, path)


def write_csv(path, columns, data, comment: str = "") -> None:
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        data = data.reshape(0, len(columns))
    if data.ndim != 2 or data.shape[1] != len(columns):
        raise ValueError(f"data shape {data.shape} does not match {len(columns)} columns")
    write_rows(path, columns, data.tolist(), comment)


def read_comment(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)


def read_csv(path):
    """Return ``(columns, float array)``; ``NA`` cells become NaN."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    if not lines:
        return [], np.empty((0, 0))
    reader = csv.reader(lines)
    columns = next(reader)
    rows = [[math.nan if c == NA else float(c) for c in row] for row in reader if row]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    return columns, data


def read_table(path):
    """Rows as dicts of strings (for mixed-type metric files)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
