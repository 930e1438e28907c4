"""HSC1 cube files and the scene directory layout.

File layout (all integers little-endian):

    bytes 0..15   16-byte header: magic "HSC1", u32 version (=1), 8 reserved zero bytes
    bytes 16..27  u32 height, u32 width, u32 bands
    byte  28      u8 dtype code (0 = float32)
    payload       bands * height * width float32 values, band-sequential
                  (all of band 0 row-major, then band 1, ...)
    optional      u32 metadata length + that many bytes of UTF-8 JSON

A dataset directory holds one subdirectory per scene:

    scene_<id>/{y.hsc, xh.hsc, xm.hsc, meta.json}

plus a top-level manifest.json listing per-scene seeds and file hashes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError
from .hsi import HsiCube

MAGIC = b"HSC1"
VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sI8x")
_DIMS = struct.Struct("<IIIB")


def save_cube(path, cube: HsiCube, metadata: dict | None = None) -> None:
    """Write a cube; band ids and any extra metadata go in the JSON trailer."""
    path = Path(path)
    meta = dict(metadata or {})
    meta.setdefault("band_ids", list(cube.band_ids))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(
        cube.data.astype(np.float32, copy=False).transpose(2, 0, 1)
    ).astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION))
        fh.write(_DIMS.pack(cube.height, cube.width, cube.bands, _DTYPE_F32))
        fh.write(payload.tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def load_cube(path) -> HsiCube:
    """Read a cube back; malformed files raise FormatError with a byte offset."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, file ends at byte offset {len(buf)} (need {_HEADER.size})"
        )
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    dims_at = _HEADER.size
    if len(buf) < dims_at + _DIMS.size:
        raise FormatError(
            f"{path}: truncated dimension block, file ends at byte offset {len(buf)}"
        )
    h, w, m, dtype_code = _DIMS.unpack_from(buf, dims_at)
    if dtype_code != _DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype code {dtype_code} at byte offset {dims_at + 12}")
    if min(h, w, m) < 1:
        raise FormatError(f"{path}: degenerate extents {h}x{w}x{m} at byte offset {dims_at}")
    payload_at = dims_at + _DIMS.size
    need = h * w * m * 4
    avail = len(buf) - payload_at
    if avail < need:
        raise FormatError(
            f"{path}: header declares {need} payload bytes but only {avail} are present "
            f"(file truncated at byte offset {len(buf)})"
        )
    data = np.frombuffer(buf, dtype="<f4", count=h * w * m, offset=payload_at)
    data = data.reshape(m, h, w).transpose(1, 2, 0)

    band_ids: list[str] = []
    tail_at = payload_at + need
    if tail_at < len(buf):
        if len(buf) < tail_at + 4:
            raise FormatError(f"{path}: truncated metadata length field at byte offset {tail_at}")
        (meta_len,) = struct.unpack_from("<I", buf, tail_at)
        meta_at = tail_at + 4
        if len(buf) < meta_at + meta_len:
            raise FormatError(
                f"{path}: metadata declares {meta_len} bytes but only {len(buf) - meta_at} "
                f"are present (file truncated at byte offset {len(buf)})"
            )
        if len(buf) > meta_at + meta_len:
            raise FormatError(
                f"{path}: {len(buf) - meta_at - meta_len} unexpected trailing bytes "
                f"at byte offset {meta_at + meta_len}"
            )
        try:
            meta = json.loads(buf[meta_at:meta_at + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: undecodable metadata at byte offset {meta_at}: {exc}") from exc
        band_ids = [str(b) for b in meta.get("band_ids", [])]

    return HsiCube(np.ascontiguousarray(data), band_ids=band_ids)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    scene_id: str
    y: HsiCube
    xh: HsiCube
    xm: HsiCube
    meta: dict


def save_scene(root, scene_id: str, y: HsiCube, xh: HsiCube, xm: HsiCube,
               meta: dict) -> Path:
    d = Path(root) / f"scene_{scene_id}"
    d.mkdir(parents=True, exist_ok=True)
    save_cube(d / "y.hsc", y)
    save_cube(d / "xh.hsc", xh)
    save_cube(d / "xm.hsc", xm)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Scene(
        scene_id=d.name.removeprefix("scene_"),
        y=load_cube(d / "y.hsc"),
        xh=load_cube(d / "xh.hsc"),
        xm=load_cube(d / "xm.hsc"),
        meta=meta,
    )


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not dirs:
        raise UsageError(f"no scene_* directories under {root}")
    return [load_scene(d) for d in dirs]
