"""Checkpoint file: JSON header plus raw little-endian float32 blocks.

Layout: one magic line ``DEFORMAD-CKPT 1 <header_bytes>``, then the JSON
header (format version, config echo, parameter manifest with shapes and
byte offsets into the blob), then the concatenated parameter blocks in
manifest order. Optimizer state is deliberately not persisted.
"""

from __future__ import annotations

import json

import numpy as np

from .config import ExperimentConfig
from .fileio import DataError, atomic_write_bytes

MAGIC = "DEFORMAD-CKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, model, extra=None):
    manifest = []
    blocks = []
    offset = 0
    for name, param in model.named_parameters():
        block = np.ascontiguousarray(param.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(param.shape),
                         "offset": offset, "bytes": len(block)})
        blocks.append(block)
        offset += len(block)
    header = {
        "format_version": FORMAT_VERSION,
        "config": json.loads(model.config.to_json()),
        "manifest": manifest,
        "extra": extra or {},
    }
    header_bytes = (json.dumps(header, indent=2, sort_keys=True) + "\n").encode()
    magic_line = f"{MAGIC} {FORMAT_VERSION} {len(header_bytes)}\n".encode()
    atomic_write_bytes(path, magic_line + header_bytes + b"".join(blocks))


def read_header(path):
    with open(path, "rb") as fh:
        magic_line = fh.readline()
        parts = magic_line.decode(errors="replace").split()
        if len(parts) != 3 or parts[0] != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        if int(parts[1]) != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {parts[1]}")
        header_len = int(parts[2])
        header = json.loads(fh.read(header_len).decode())
        blob_start = fh.tell()
    return header, blob_start


def load_checkpoint(path, model=None):
    """Restore parameters; builds a fresh model from the config echo when
    none is supplied. Returns (model, extra)."""
    header, blob_start = read_header(path)
    if model is None:
        from .model import Model
        config = ExperimentConfig.from_dict(header["config"])
        model = Model(config)
    with open(path, "rb") as fh:
        fh.seek(blob_start)
        blob = fh.read()
    params = dict(model.named_parameters())
    manifest_names = [entry["name"] for entry in header["manifest"]]
    if sorted(manifest_names) != sorted(params):
        raise DataError(f"{path}: parameter manifest does not match the "
                        f"model ({len(manifest_names)} vs {len(params)})")
    for entry in header["manifest"]:
        param = params[entry["name"]]
        raw = blob[entry["offset"]:entry["offset"] + entry["bytes"]]
        values = np.frombuffer(raw, dtype="<f4")
        if values.size != param.size:
            raise DataError(f"{path}: block for {entry['name']} has "
                            f"{values.size} values, expected {param.size}")
        param.data = values.reshape(param.shape).astype(param.data.dtype)
    return model, header.get("extra", {})
