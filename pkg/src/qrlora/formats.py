"""Deterministic on-disk formats: RLMX matrices, checkpoint manifests, JSON.

RLMX layout (little-endian): magic ``RLMX`` (bytes 0-3), version byte = 1
(byte 4), dtype byte (byte 5; 0 = float64, 1 = float32), rows u32 (bytes
6-9), cols u32 (bytes 10-13), then rows*cols scalars row-major. Readers
report the byte offset at which parsing failed. All writes are atomic
(temp file + rename); float32 payloads are upcast to float64 on load.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ManifestError, MatrixFileError
from .linalg import as_matrix

MAGIC = b"RLMX"
VERSION = 1
_HEADER = struct.Struct("<4sBBII")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {"f8": 0, "f4": 1, "float64": 0, "float32": 1}

ROLES = (
    "original",
    "residual",
    "adapter_a_main",
    "adapter_b_main",
    "adapter_a_sub",
    "adapter_b_sub",
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def _atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_matrix(path, w, dtype: str = "f8") -> None:
    w = as_matrix(w, "matrix")
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    rows, cols = w.shape
    header = _HEADER.pack(MAGIC, VERSION, code, rows, cols)
    payload = np.ascontiguousarray(w, dtype=_DTYPES[code]).tobytes()
    _atomic_write_bytes(path, header + payload)


def read_matrix(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise MatrixFileError(f"cannot read {path}: {exc}", offset=0) from exc

    if len(data) < 4 or data[:4] != MAGIC:
        raise MatrixFileError(f"bad magic in {path}", offset=0)
    if len(data) < _HEADER.size:
        raise MatrixFileError(f"truncated header in {path}", offset=len(data))
    _, version, dtype_code, rows, cols = _HEADER.unpack_from(data)
    if version != VERSION:
        raise MatrixFileError(f"unsupported version {version} in {path}", offset=4)
    if dtype_code not in _DTYPES:
        raise MatrixFileError(f"unknown dtype code {dtype_code} in {path}", offset=5)
    if rows == 0:
        raise MatrixFileError(f"zero rows in {path}", offset=6)
    if cols == 0:
        raise MatrixFileError(f"zero cols in {path}", offset=10)

    dtype = _DTYPES[dtype_code]
    expected = rows * cols * dtype.itemsize
    actual = len(data) - _HEADER.size
    if actual != expected:
        raise MatrixFileError(
            f"payload is {actual} bytes, expected {expected} in {path}",
            offset=_HEADER.size + min(actual, expected),
        )
    values = np.frombuffer(data, dtype=dtype, offset=_HEADER.size)
    finite = np.isfinite(values)
    if not finite.all():
        first = int(np.flatnonzero(~finite)[0])
        raise MatrixFileError(
            f"non-finite scalar at index {first} in {path}",
            offset=_HEADER.size + first * dtype.itemsize,
        )
    return values.astype(np.float64).reshape(rows, cols)


def write_matrix_csv(path, w) -> None:
    w = as_matrix(w, "matrix")
    lines = [",".join(format(v, ".17g") for v in row) for row in w]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_matrix_csv(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    except (OSError, ValueError) as exc:
        raise MatrixFileError(f"cannot parse CSV {path}: {exc}", offset=0) from exc
    return as_matrix(arr, f"CSV {path}")


def matrix_io(csv: bool):
    """(reader, writer, extension) triple for the selected matrix format."""
    if csv:
        return read_matrix_csv, write_matrix_csv, "csv"
    return read_matrix, write_matrix, "rlmx"


@dataclass
class ManifestEntry:
    name: str
    role: str
    rows: int
    cols: int
    file: str
    selected_cols: list[int] | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "rows": self.rows,
            "cols": self.cols,
            "file": self.file,
            "selected_cols": self.selected_cols,
        }


def save_manifest(directory, entries: list[ManifestEntry]) -> None:
    _validate_entries(entries)
    doc = {
        "format_version": MANIFEST_VERSION,
        "layers": [e.to_dict() for e in entries],
    }
    write_json(os.path.join(os.fspath(directory), MANIFEST_NAME), doc)


def load_manifest(directory) -> list[ManifestEntry]:
    path = os.path.join(os.fspath(directory), MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('format_version')}")
    entries = []
    for raw in doc.get("layers", []):
        try:
            entries.append(
                ManifestEntry(
                    name=raw["name"],
                    role=raw["role"],
                    rows=int(raw["rows"]),
                    cols=int(raw["cols"]),
                    file=raw["file"],
                    selected_cols=raw.get("selected_cols"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest entry {raw!r}") from exc
    _validate_entries(entries)
    return entries


def _validate_entries(entries: list[ManifestEntry]) -> None:
    seen = set()
    for e in entries:
        if e.role not in ROLES:
            raise ManifestError(f"unknown role {e.role!r} for layer {e.name!r}")
        key = (e.name, e.role)
        if key in seen:
            raise ManifestError(f"duplicate manifest entry for {key}")
        seen.add(key)


def load_checkpoint(directory, csv: bool = False) -> dict[str, dict]:
    """Manifest-driven load: {layer_name: {role: array, 'selected_cols': {...}}}.

    Shapes are checked against the manifest; missing or corrupt files
    surface their underlying error.
    """
    reader, _, _ = matrix_io(csv)
    directory = os.fspath(directory)
    layers: dict[str, dict] = {}
    for entry in load_manifest(directory):
        arr = reader(os.path.join(directory, entry.file))
        if arr.shape != (entry.rows, entry.cols):
            raise ManifestError(
                f"{entry.file} has shape {arr.shape}, manifest says "
                f"({entry.rows}, {entry.cols})"
            )
        layer = layers.setdefault(entry.name, {"selected_cols": {}})
        layer[entry.role] = arr
        if entry.selected_cols is not None:
            layer["selected_cols"][entry.role] = [int(c) for c in entry.selected_cols]
    return layers


def sanitize_json(value):
    """Replace non-finite floats with None so output is strict JSON."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: sanitize_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize_json(v) for v in value]
    if isinstance(value, np.floating):
        return sanitize_json(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(path, doc) -> None:
    payload = json.dumps(sanitize_json(doc), indent=2, allow_nan=False)
    _atomic_write_bytes(path, (payload + "\n").encode())


REPORT_VERSION = 1


def _norm_stats_dict(stats) -> dict | None:
    if stats is None:
        return None
    return {
        "mean_selected": stats.mean_selected,
        "mean_nonselected": stats.mean_nonselected,
        "avg_ratio": stats.avg_ratio,
        "max_ratio": stats.max_ratio,
    }


def diagnostics_report_dict(report) -> dict:
    """JSON document for a DiagnosticsReport (schema: diagnostics_report)."""
    return {
        "format_version": REPORT_VERSION,
        "layers": [
            {
                "layer_id": rec.layer_id,
                "effective_rank": rec.effective_rank,
                "rank_efficiency": rec.rank_efficiency,
                "phi": rec.phi,
                "mean_offdiag_cos_a": rec.mean_offdiag_cos_a,
                "mean_offdiag_cos_b": rec.mean_offdiag_cos_b,
                "norm_stats": _norm_stats_dict(rec.norm_stats),
            }
            for rec in report.layers
        ],
        "aggregates": {
            "mean_effective_rank": report.mean_effective_rank,
            "mean_rank_efficiency": report.mean_rank_efficiency,
            "mean_phi": report.mean_phi,
            "mean_offdiag_cos_a": report.mean_offdiag_cos_a,
            "mean_offdiag_cos_b": report.mean_offdiag_cos_b,
            "norm_stats": _norm_stats_dict(report.norm_stats),
        },
    }


def train_report_dict(report) -> dict:
    """JSON document for a TrainReport (schema: train_report).

    Wall clock is deliberately excluded so identical runs serialize to
    identical bytes; it belongs in the sidecar metadata file.
    """
    return {
        "format_version": REPORT_VERSION,
        "config": report.config,
        "initial": {
            "source_loss": report.initial_source_loss,
            "target_loss": report.initial_target_loss,
        },
        "final": {
            "source_loss": report.final_source_loss,
            "target_loss": report.final_target_loss,
        },
        "loss_trajectory": report.loss_trajectory,
        "snapshots": [
            {"step": step, "report": diagnostics_report_dict(diag)}
            for step, diag in report.snapshots
        ],
    }
