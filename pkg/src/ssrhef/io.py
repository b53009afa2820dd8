"""Binary and text file formats: DMAP density maps, CKPT checkpoints, PGM
images and per-image JSON annotations."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .groundtruth import AnnotationSet

DMAP_MAGIC = b"DMAP0001"
CKPT_MAGIC = b"SSRHEF01"


class FormatError(ValueError):
    pass


# DMAP: magic, u32 height, u32 width, u32 stride, f64 values (all little-endian)

def dmap_bytes(values, stride: int = 1) -> bytes:
    v = np.ascontiguousarray(values, dtype="<f8")
    if v.ndim != 2:
        raise FormatError(f"DMAP holds a 2-d grid, got shape {v.shape}")
    h, w = v.shape
    return DMAP_MAGIC + struct.pack("<III", h, w, stride) + v.tobytes()


def parse_dmap(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 20 or buf[:8] != DMAP_MAGIC:
        raise FormatError("not a DMAP file (bad magic)")
    h, w, stride = struct.unpack_from("<III", buf, 8)
    if len(buf) != 20 + 8 * h * w:
        raise FormatError(f"DMAP length {len(buf)} does not match {h}x{w} grid")
    vals = np.frombuffer(buf, dtype="<f8", offset=20).reshape(h, w).astype(np.float64)
    return vals, stride


def write_dmap(path, values, stride: int = 1) -> None:
    Path(path).write_bytes(dmap_bytes(values, stride))


def read_dmap(path) -> tuple[np.ndarray, int]:
    return parse_dmap(Path(path).read_bytes())


# CKPT: magic, u32 entry count; per entry u32 name length, utf-8 name,
# u32 rank, u32 dims, f64 values

def ckpt_bytes(params: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def parse_ckpt(buf: bytes) -> dict:
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    try:
        (n,) = struct.unpack_from("<I", buf, 8)
        off = 12
        params = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(buf):
                raise FormatError(f"checkpoint truncated inside entry {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except struct.error as e:
        raise FormatError(f"checkpoint truncated: {e}") from e
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after checkpoint entries")
    return params


def save_checkpoint(path, params: dict) -> None:
    Path(path).write_bytes(ckpt_bytes(params))


def load_checkpoint(path) -> dict:
    return parse_ckpt(Path(path).read_bytes())


# PGM (binary P5, 8-bit)

def write_pgm(path, pixels) -> None:
    a = np.asarray(pixels)
    if a.ndim != 2:
        raise FormatError(f"PGM needs a 2-d image, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes())


def read_pgm(path) -> np.ndarray:
    """8-bit P5 image as float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / 255.0


def density_to_bytes(values) -> np.ndarray:
    """Min-max scale to 0..255; a constant map (including all zeros) is all black."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_density_image(values, path) -> None:
    write_pgm(path, density_to_bytes(values))


# annotations

def write_annotations(path, ann: AnnotationSet) -> None:
    doc = {"width": ann.width, "height": ann.height, "points": ann.points.tolist()}
    if ann.tags is not None:
        doc["tags"] = list(ann.tags)
    Path(path).write_text(json.dumps(doc))


def read_annotations(path) -> AnnotationSet:
    try:
        doc = json.loads(Path(path).read_text())
        return AnnotationSet(doc["points"], int(doc["height"]), int(doc["width"]), doc.get("tags"))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed annotation file ({e})") from e


def load_dataset(directory):
    """Pairs ``name.pgm`` with ``name.json`` in sorted name order."""
    d = Path(directory)
    out = []
    for img_path in sorted(d.glob("*.pgm")):
        ann_path = img_path.with_suffix(".json")
        if not ann_path.exists():
            raise FormatError(f"{img_path} has no matching annotation {ann_path.name}")
        img = read_pgm(img_path)
        ann = read_annotations(ann_path)
        if img.shape != (ann.height, ann.width):
            raise FormatError(f"{img_path}: image {img.shape} vs annotation {ann.height}x{ann.width}")
        out.append((img_path.stem, img, ann))
    if not out:
        raise FormatError(f"no .pgm images found in {d}")
    return out
