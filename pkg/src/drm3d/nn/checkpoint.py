"""Parameter checkpoints: a JSON manifest plus a little-endian float64 blob.

For every parameter the blob holds its values, then its first and second Adam
moments, each C-order. The manifest records names, shapes, byte offsets and
the Adam step count, plus any caller-supplied header (model config, training
state).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DatasetFormatError, TruncatedFileError, VersionMismatchError

CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params, header: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in named_params:
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "step": p.step})
        for arr in (p.data, p.m, p.v):
            b = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            chunks.append(b)
            offset += len(b)
    (path / "params.bin").write_bytes(b"".join(chunks))
    manifest = {"format_version": CHECKPOINT_VERSION, "dtype": "<f8", "bytes": offset,
                "parameters": entries, "header": header or {}}
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "checkpoint.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint at {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"unreadable checkpoint manifest {mpath}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(path, named_params) -> dict:
    """Load values and Adam state into ``named_params`` in place; returns the header."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / "params.bin").read_bytes()
    if len(blob) != manifest["bytes"]:
        raise TruncatedFileError(f"checkpoint blob has {len(blob)} bytes, manifest says {manifest['bytes']}")
    by_name = {e["name"]: e for e in manifest["parameters"]}
    params = dict(named_params)
    if set(by_name) != set(params):
        missing = sorted(set(params) - set(by_name))
        extra = sorted(set(by_name) - set(params))
        raise ConfigError(f"checkpoint parameters differ from model: missing={missing[:5]} extra={extra[:5]}")
    for name, p in params.items():
        e = by_name[name]
        if tuple(e["shape"]) != p.shape:
            raise ConfigError(f"parameter {name}: checkpoint shape {tuple(e['shape'])} vs model {p.shape}")
        n = p.size * 8
        arrs = [np.frombuffer(blob, dtype="<f8", count=p.size, offset=e["offset"] + i * n).reshape(p.shape)
                for i in range(3)]
        p.data[...] = arrs[0]
        p.m[...] = arrs[1]
        p.v[...] = arrs[2]
        p.step = int(e["step"])
    return manifest["header"]
