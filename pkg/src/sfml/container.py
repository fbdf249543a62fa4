"""Binary container: magic, JSON header, little-endian float64 payload.

Layout::

    b"SFMLBIN1" | uint64 LE header length | header (UTF-8 JSON) | payload

The header always carries ``shape`` and ``layout`` for the payload so that
readers can rebuild the array without out-of-band knowledge.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError

MAGIC = b"SFMLBIN1"


def encode(header: dict, payload: np.ndarray, layout: str = "C") -> bytes:
    arr = np.asarray(payload, dtype="<f8")
    header = dict(header)
    header["shape"] = list(arr.shape)
    header["layout"] = layout
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = arr.tobytes(order="F" if layout == "F" else "C")
    return MAGIC + struct.pack("<Q", len(raw)) + raw + body


def decode(blob: bytes) -> tuple[dict, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ShapeError("not an sfml container (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n].decode())
    shape = tuple(header["shape"])
    flat = np.frombuffer(blob[16 + n :], dtype="<f8")
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"payload has {flat.size} values, header says {shape}")
    order = "F" if header.get("layout") == "F" else "C"
    return header, flat.reshape(shape, order=order).astype(np.float64)


def write(path, header: dict, payload: np.ndarray, layout: str = "C") -> Path:
    path = Path(path)
    path.write_bytes(encode(header, payload, layout))
    return path


def read(path) -> tuple[dict, np.ndarray]:
    return decode(Path(path).read_bytes())


def payload_bytes(path) -> bytes:
    """Raw payload section of a container file (for byte-identity checks)."""
    blob = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", blob[8:16])
    return blob[16 + n :]
