"""Binary formats: named-tensor checkpoints and image files.

Checkpoint layout (all little-endian)::

    b"MGCK" | u32 version | u32 n_blocks
    per block: u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | f32 data

Raw image layout: ``b"MGIM" | u32 version | u32 h | u32 w | u32 c | f32 data``.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from molgeom.errors import SchemaError

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1
IMAGE_MAGIC = b"MGIM"
IMAGE_VERSION = 1


def dump_tensors(blocks: Mapping[str, np.ndarray]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blocks))]
    for name, arr in blocks.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def load_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {version}")
        pos = 12
        blocks = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(blob):
                raise SchemaError(f"block {name!r} is truncated")
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            blocks[name] = data.reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise SchemaError(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise SchemaError("trailing bytes after the last checkpoint block")
    return blocks


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_ppm(blob: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(blob)
    if not m:
        raise SchemaError("bad PPM header")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise SchemaError("only 8-bit PPM images are supported")
    body = blob[m.end() : m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise SchemaError("PPM pixel data is truncated")
    return (np.frombuffer(body, np.uint8).reshape(h, w, 3) / float(maxval)).astype(np.float32)


def dump_raw_image(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype="<f4")
    h, w, c = img.shape
    return IMAGE_MAGIC + struct.pack("<4I", IMAGE_VERSION, h, w, c) + img.tobytes()


def read_raw_image(blob: bytes) -> np.ndarray:
    if len(blob) < 20:
        raise SchemaError("truncated image header")
    version, h, w, c = struct.unpack_from("<4I", blob, 4)
    if version != IMAGE_VERSION:
        raise SchemaError(f"unsupported image version {version}")
    body = blob[20:]
    if len(body) != 4 * h * w * c:
        raise SchemaError("image body has the wrong size")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Read a P6 PPM or raw float32 image, detected by magic bytes."""
    blob = Path(path).read_bytes()
    if blob[:4] == IMAGE_MAGIC:
        img = read_raw_image(blob)
    elif blob[:2] == b"P6":
        img = read_ppm(blob)
    else:
        raise SchemaError(f"{path}: unrecognised image format")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise SchemaError(f"{path}: pixel values must lie in [0, 1]")
    return img
