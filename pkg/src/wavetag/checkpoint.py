"""Single-file checkpoints: a JSON header line plus a float32 blob.

Layout::

    {"format_version": 1, "configs": {...}, "params": [entry...], "blob_bytes": n}\n
    <n bytes of little-endian float32 data>
    [{"section": "adam", "step": t, "entries": [entry...], "blob_bytes": m}\n
     <m bytes of little-endian float32 data>]

Each entry is ``{"name", "shape", "dtype", "offset"}`` with offsets in
bytes from the start of that section's blob. Offsets must tile the blob
exactly (no gaps, no overlap), which makes save -> load -> save
byte-identical and catches truncation or tampering on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffops import AdamState

FORMAT_VERSION = 1
_BLOB_DTYPE = "<f4"


class CheckpointError(Exception):
    """Base class for checkpoint serialization problems."""


class CheckpointHeaderError(CheckpointError):
    """Header line missing, unparseable, or structurally wrong."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Entry shapes/offsets inconsistent with the stored blob."""


class CheckpointConfigError(CheckpointError):
    """Stored model config does not match the requested architecture."""


def config_hash(configs: dict) -> str:
    """sha256 over the canonical (sorted, compact) JSON form of configs."""
    canon = json.dumps(configs, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Parsed checkpoint: configs plus named float32 arrays (+ Adam state)."""

    format_version: int
    configs: dict
    tensors: dict[str, np.ndarray]
    adam: AdamState | None = None
    adam_names: list[str] | None = None


def _build_section(tensors: "dict[str, np.ndarray]") -> tuple[list[dict], bytes]:
    entries: list[dict] = []
    parts: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        # np.asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d)
        data = np.asarray(arr, dtype=_BLOB_DTYPE, order="C")
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "dtype": _BLOB_DTYPE, "offset": offset})
        parts.append(raw)
        offset += len(raw)
    return entries, b"".join(parts)


def save_checkpoint(
    path: str | Path,
    configs: dict,
    tensors: "dict[str, np.ndarray]",
    adam: AdamState | None = None,
    adam_names: "list[str] | None" = None,
) -> Path:
    """Write tensors (and optionally Adam moments) to ``path``.

    ``adam_names`` fixes the moment ordering; it defaults to the names
    present in the Adam state, sorted.
    """
    path = Path(path)
    entries, blob = _build_section(tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "configs": configs,
        "params": entries,
        "blob_bytes": len(blob),
    }
    chunks = [json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), b"\n", blob]
    if adam is not None:
        if adam_names is None:
            adam_names = sorted(adam.m)
        moment_tensors: dict[str, np.ndarray] = {}
        for name in adam_names:
            if name not in adam.m:
                raise CheckpointError(f"Adam state has no moments for parameter '{name}'")
            moment_tensors[f"{name}.m"] = adam.m[name]
            moment_tensors[f"{name}.v"] = adam.v[name]
        a_entries, a_blob = _build_section(moment_tensors)
        a_header = {"section": "adam", "step": adam.t, "entries": a_entries, "blob_bytes": len(a_blob)}
        chunks += [json.dumps(a_header, sort_keys=True, separators=(",", ":")).encode("utf-8"), b"\n", a_blob]
    path.write_bytes(b"".join(chunks))
    return path


def _read_section(buf: bytes, pos: int, entries: list[dict], blob_bytes: int, what: str) -> tuple[dict[str, np.ndarray], int]:
    if not isinstance(blob_bytes, int) or blob_bytes < 0:
        raise CheckpointHeaderError(f"{what}: blob_bytes must be a non-negative integer")
    blob = buf[pos : pos + blob_bytes]
    if len(blob) != blob_bytes:
        raise CheckpointShapeError(f"{what}: blob truncated ({len(blob)} of {blob_bytes} bytes present)")
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in entries:
        try:
            name, shape, dtype, offset = entry["name"], entry["shape"], entry["dtype"], entry["offset"]
        except (TypeError, KeyError) as exc:
            raise CheckpointHeaderError(f"{what}: malformed entry {entry!r}") from exc
        if dtype != _BLOB_DTYPE:
            raise CheckpointHeaderError(f"{what}: entry '{name}' has unsupported dtype {dtype!r}")
        if name in tensors:
            raise CheckpointHeaderError(f"{what}: duplicate entry name '{name}'")
        if offset != expected_offset:
            raise CheckpointShapeError(
                f"{what}: entry '{name}' at offset {offset}, expected {expected_offset} (gap or overlap)"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > blob_bytes:
            raise CheckpointShapeError(f"{what}: entry '{name}' overruns blob ({offset + nbytes} > {blob_bytes})")
        arr = np.frombuffer(blob, dtype=_BLOB_DTYPE, count=count, offset=offset).reshape(shape).copy()
        tensors[name] = arr
        expected_offset = offset + nbytes
    if expected_offset != blob_bytes:
        raise CheckpointShapeError(f"{what}: {blob_bytes - expected_offset} trailing bytes not covered by entries")
    return tensors, pos + blob_bytes


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse and validate a checkpoint file."""
    path = Path(path)
    buf = path.read_bytes()
    newline = buf.find(b"\n")
    if newline < 0:
        raise CheckpointHeaderError(f"{path}: no header line found")
    try:
        header = json.loads(buf[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointHeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointHeaderError(f"{path}: header missing format_version")
    version = header["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    for key in ("configs", "params", "blob_bytes"):
        if key not in header:
            raise CheckpointHeaderError(f"{path}: header missing '{key}'")
    tensors, pos = _read_section(buf, newline + 1, header["params"], header["blob_bytes"], "params")

    adam = None
    adam_names: list[str] | None = None
    if pos < len(buf):
        newline2 = buf.find(b"\n", pos)
        if newline2 < 0:
            raise CheckpointHeaderError(f"{path}: trailing bytes after params blob are not a section header")
        try:
            a_header = json.loads(buf[pos:newline2].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointHeaderError(f"{path}: adam section header is not valid JSON: {exc}") from exc
        if not isinstance(a_header, dict) or a_header.get("section") != "adam":
            raise CheckpointHeaderError(f"{path}: unexpected trailing section {a_header!r}")
        moments, pos = _read_section(buf, newline2 + 1, a_header["entries"], a_header["blob_bytes"], "adam")
        adam = AdamState(t=int(a_header.get("step", 0)))
        adam_names = []
        for name, arr in moments.items():
            if name.endswith(".m"):
                adam.m[name[:-2]] = arr
                adam_names.append(name[:-2])
            elif name.endswith(".v"):
                adam.v[name[:-2]] = arr
            else:
                raise CheckpointHeaderError(f"{path}: adam entry '{name}' lacks .m/.v suffix")
        if set(adam.m) != set(adam.v):
            raise CheckpointHeaderError(f"{path}: adam section has mismatched m/v entries")
        if pos != len(buf):
            raise CheckpointShapeError(f"{path}: {len(buf) - pos} unexplained trailing bytes")
    return Checkpoint(format_version=version, configs=header["configs"], tensors=tensors, adam=adam, adam_names=adam_names)
