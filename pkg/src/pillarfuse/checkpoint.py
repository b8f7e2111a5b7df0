"""Binary parameter checkpoints.

Layout (all integers little-endian, no alignment padding):

    bytes 0..7   magic b"PFCKPT01"
    bytes 8..11  uint32 entry count
    per entry:
        uint16   name length in bytes
        bytes    utf-8 dotted parameter name
        uint8    ndim
        uint32×ndim  dimension sizes
        float64×prod(dims)  values, row-major, little-endian

Entries are written in sorted-name order so identical states produce
identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import FormatError

MAGIC = b"PFCKPT01"


def save_checkpoint(path, state: Dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(state[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"{name}: too many dimensions")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state: Dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(take(8 * n_values), dtype="<f8")
        if name in state:
            raise FormatError(f"{path}: duplicate entry {name}")
        state[name] = values.astype(np.float64).reshape(shape)
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after last entry")
    return state
