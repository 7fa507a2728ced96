"""On-disk formats: MMTF tensors, PGM images, canonical JSON digests.

MMTF is a tiny versioned tensor container: magic "MMTF", version, dtype
tag, rank, dims (all little-endian uint32), then raw float32 data.
Images use binary PGM (P5), 16-bit for dataset images so no precision is
lost, 8-bit for previews.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"MMTF"
TENSOR_VERSION = 1
_DTYPE_F32 = 1


def write_tensor(path: Path | str, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    header = struct.pack(
        f"<4sIII{data.ndim}I",
        TENSOR_MAGIC,
        TENSOR_VERSION,
        _DTYPE_F32,
        data.ndim,
        *data.shape,
    )
    Path(path).write_bytes(header + data.tobytes())


def read_tensor(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"not an MMTF tensor file: {path}")
    version, dtype_tag, rank = struct.unpack_from("<III", raw, 4)
    if version > TENSOR_VERSION:
        raise ValueError(f"unsupported MMTF version {version} in {path}")
    if dtype_tag != _DTYPE_F32:
        raise ValueError(f"unsupported MMTF dtype tag {dtype_tag} in {path}")
    dims = struct.unpack_from(f"<{rank}I", raw, 16)
    offset = 16 + 4 * rank
    expected = int(np.prod(dims)) * 4 if rank else 4
    payload = raw[offset:]
    if len(payload) != expected:
        raise ValueError(
            f"MMTF payload length {len(payload)} != expected {expected} for dims {dims}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_pgm(path: Path | str, image: np.ndarray, maxval: int = 65535) -> None:
    """Binary PGM of an image in [0, 1]; 16-bit values are big-endian."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    q = np.clip(np.round(image * maxval), 0, maxval)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    if maxval > 255:
        payload = q.astype(">u2").tobytes()
    else:
        payload = q.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def read_pgm(path: Path | str) -> np.ndarray:
    """PGM image scaled back to floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"not a binary PGM file: {path}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        data = np.frombuffer(raw, dtype=">u2", offset=pos, count=width * height)
    else:
        data = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=width * height)
    return (data.reshape(height, width).astype(np.float64) / maxval).astype(np.float32)


def canonical_json(obj) -> bytes:
    """Deterministic JSON encoding used for digests and file headers."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()
