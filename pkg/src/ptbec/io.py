"""CSV and JSON emission shared by the command-line tools."""

from __future__ import annotations

import csv
import json
import math
import subprocess
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__


def format_float(x) -> str:
    """Shortest string that parses back to the same double."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path, header, columns) -> Path:
    """Write equal-length columns under ``header`` (RFC 4180, CRLF line ends)."""
    path = Path(path)
    cols = [np.asarray(c) for c in columns]
    if len(cols) != len(header):
        raise ValueError("header and columns differ in length")
    n = {c.shape[0] for c in cols}
    if len(n) > 1:
        raise ValueError("columns differ in length")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format_float(v)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))


def write_matrix(path, row_label: str, row_values, col_values, matrix) -> Path:
    """Matrix CSV: the first row holds the column coordinates, the first column the row coordinates."""
    path = Path(path)
    m = np.asarray(matrix)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([row_label] + [format_float(c) for c in col_values])
        for r, line in zip(row_values, m):
            w.writerow([format_float(r)] + [_cell(v) for v in line])
    return path


def read_matrix(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    cols = np.array([float(v) for v in rows[0][1:]])
    rv = np.array([float(r[0]) for r in rows[1:]])
    m = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return rv, cols, m


@lru_cache(maxsize=1)
def git_version() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else format_float(x)
    return obj


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


__all__ = ["format_float", "write_csv", "read_csv", "write_matrix", "read_matrix",
           "git_version", "write_json", "read_json"]
