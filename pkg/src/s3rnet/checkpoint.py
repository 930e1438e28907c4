"""Checkpoint files: a JSON manifest followed by raw little-endian float32
tensor blobs, concatenated in manifest order.

    u32 manifest length | manifest JSON (UTF-8) | tensor blobs

The manifest carries the model config, a name -> (shape, offset, nbytes)
table (offsets relative to the start of the blob region) and free-form
metadata (creation info, optimizer state descriptors, RNG state, ...).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, S3RNet

FORMAT_NAME = "s3rnet-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path, model: S3RNet, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write model parameters (plus any extra tensors, e.g. optimizer moments)."""
    entries: list[tuple[str, np.ndarray]] = [
        (name, t.data) for name, t in model.named_params()
    ]
    for name, arr in (extra_tensors or {}).items():
        entries.append((name, np.asarray(arr)))

    table = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr.astype("<f4", copy=False)).tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "init_seed": model.init_seed,
        "tensors": table,
        "meta": dict(meta or {}),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise CheckpointError(f"{path}: truncated manifest length field")
    (mlen,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + mlen:
        raise CheckpointError(f"{path}: manifest declares {mlen} bytes, file has {len(buf) - 4}")
    try:
        manifest = json.loads(buf[4:4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: undecodable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    try:
        config = ModelConfig.from_dict(manifest["config"])
        table = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc

    blob_at = 4 + mlen
    tensors: dict[str, np.ndarray] = {}
    for entry in table:
        try:
            name, shape = entry["name"], tuple(entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed tensor entry {entry}: {exc}") from exc
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != count * 4:
            raise CheckpointError(
                f"{path}: tensor {name} declares {nbytes} bytes for shape {shape}"
            )
        if blob_at + offset + nbytes > len(buf):
            raise CheckpointError(
                f"{path}: tensor {name} extends past end of file "
                f"({blob_at + offset + nbytes} > {len(buf)})"
            )
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=blob_at + offset)
        tensors[name] = arr.reshape(shape).copy()
    meta = dict(manifest.get("meta", {}))
    meta["init_seed"] = manifest.get("init_seed", 0)
    return Checkpoint(config=config, tensors=tensors, meta=meta)


def restore_model(source) -> tuple[S3RNet, Checkpoint]:
    """Rebuild a model from a checkpoint path or Checkpoint object."""
    ck = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    model = S3RNet(ck.config, seed=int(ck.meta.get("init_seed", 0)))
    expected = {name for name, _ in model.named_params()}
    provided = {name for name in ck.tensors if not name.startswith("opt.")}
    if expected - provided:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(expected - provided)[:5]} ...")
    for name, t in model.named_params():
        arr = ck.tensors[name]
        if tuple(arr.shape) != t.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {arr.shape} != model shape {t.shape}"
            )
        t.data[...] = arr
    return model, ck
