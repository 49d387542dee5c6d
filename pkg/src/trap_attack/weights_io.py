"""Single-file binary weight format shared by the decomposer and layout generator.

Layout: a 24-byte header ``<4s I I I q`` holding the magic ``TRPW``, a mode
code, the input width ``d``, the hidden width ``h`` and the seed, followed by
row-major little-endian float32 parameter blocks in declaration order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRPW"
HEADER = struct.Struct("<4sIIIq")

MODE_CODES = {"analytic": 0, "learned": 1, "layout": 2}
MODE_NAMES = {v: k for k, v in MODE_CODES.items()}


def write_weights(path, mode: str, d: int, h: int, seed: int, blocks) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, MODE_CODES[mode], d, h, seed))
        for block in blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    return path


def read_header(path) -> tuple[str, int, int, int]:
    with open(path, "rb") as fh:
        magic, code, d, h, seed = HEADER.unpack(fh.read(HEADER.size))
    if magic != MAGIC:
        raise ValueError(f"{path} is not a weights file")
    return MODE_NAMES[code], d, h, seed


def read_blocks(path, shapes) -> list[np.ndarray]:
    """Read parameter blocks of the given shapes, in order, after the header."""
    data = Path(path).read_bytes()[HEADER.size :]
    out, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) if len(shape) else 1
        chunk = data[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise ValueError(f"{path} is truncated")
        out.append(np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape))
        offset += 4 * n
    if offset != len(data):
        raise ValueError(f"{path} has {len(data) - offset} trailing bytes")
    return out
