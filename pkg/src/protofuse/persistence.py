"""Binary tensor container ("VSCK"), checkpoint helpers, image export.

Layout: magic "VSCK" | u32 version | u64 header length | JSON header |
float32 little-endian payload | first 8 bytes of the SHA-256 of
everything before as the trailing checksum.  The header maps tensor
names to shape and byte offset within the payload and carries a free
"meta" dictionary.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VSCK"
VERSION = 1


class ChecksumMismatch(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


def save_tensors(tensors: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    """Atomic write (temp file then rename) of named float32 tensors."""
    entries = {}
    payload = bytearray()
    for name in sorted(tensors):
        # asarray keeps 0-d shapes; ascontiguousarray would promote to 1-d
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        entries[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload.extend(arr.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + bytes(payload)
    blob += hashlib.sha256(blob).digest()[:8]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise VersionMismatch("not a VSCK container")
    if hashlib.sha256(blob[:-8]).digest()[:8] != blob[-8:]:
        raise ChecksumMismatch(f"checksum failed for {path}")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"container version {version}, expected {VERSION}")
    header = json.loads(blob[16 : 16 + hlen])
    base = 16 + hlen
    out = {}
    for name, ent in header["tensors"].items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=base + ent["offset"])
        out[name] = arr.reshape(shape).copy()
    return out, header["meta"]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- image export ----------------------------------------------------------


def to_uint8(tensor: np.ndarray) -> np.ndarray:
    """Linear map [-1, 1] -> [0, 255], H x W x C row-major."""
    arr = np.clip(np.asarray(tensor, dtype=np.float64), -1.0, 1.0)
    arr = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    if arr.ndim == 3:  # C,H,W -> H,W,C
        arr = arr.transpose(1, 2, 0)
    return arr


def export_image(tensor: np.ndarray, path: str | Path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    arr = to_uint8(tensor)
    if fmt == "ppm":
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
            f.write(arr.tobytes())
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(arr).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")


def import_image(path: str | Path) -> np.ndarray:
    """Read an exported image back to C x H x W in [-1, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        with open(path, "rb") as f:
            if f.readline().strip() != b"P6":
                raise ValueError("not a binary PPM")
            w, h = map(int, f.readline().split())
            f.readline()
            arr = np.frombuffer(f.read(), dtype=np.uint8).reshape(h, w, 3)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"))
    return (arr.astype(np.float64) / 127.5 - 1.0).transpose(2, 0, 1)
