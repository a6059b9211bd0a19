"""File formats: IFT1 binary tensors, CSV planes, PGM images, key=value manifests.

IFT1 layout: magic bytes ``IFT1``, one unsigned byte of rank, then ``rank``
little-endian uint32 extents, then the row-major float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import MAX_RANK, Tensor

MAGIC = b"IFT1"


def save_tensor(t, path):
    """Write a tensor (or ndarray) to ``path`` in the IFT1 format.

    The payload is always float32; callers holding float64 data lose
    precision here by design of the format.
    """
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"save_tensor: rank {arr.ndim} exceeds the format maximum of {MAX_RANK}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload.tobytes())


def load_tensor(path) -> Tensor:
    """Read an IFT1 file back into a float32 tensor."""
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise ValueError(f"load_tensor: bad magic in {path}, not an IFT1 file")
    rank = raw[4]
    if rank > MAX_RANK:
        raise ValueError(f"load_tensor: rank {rank} in {path} exceeds the supported maximum of {MAX_RANK}")
    header_end = 5 + 4 * rank
    if len(raw) < header_end:
        raise ValueError(f"load_tensor: truncated header in {path}")
    shape = struct.unpack(f"<{rank}I", raw[5:header_end])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    body = raw[header_end:]
    if len(body) < 4 * count:
        raise ValueError(
            f"load_tensor: truncated payload in {path}, declared {count} values "
            f"but found {len(body) // 4}"
        )
    if len(body) > 4 * count:
        raise ValueError(f"load_tensor: trailing bytes after payload in {path}")
    data = np.frombuffer(body, dtype="<f4", count=count).reshape(shape)
    return Tensor(data.astype(np.float32))


def export_csv(plane, path):
    """Write one T x F plane as CSV, one row per frame."""
    arr = np.asarray(plane.data if isinstance(plane, Tensor) else plane)
    if arr.ndim != 2:
        raise ValueError(f"export_csv: expected a 2-D plane, got shape {arr.shape}")
    np.savetxt(path, arr, fmt="%.9g", delimiter=",")


def write_pgm(plane, path) -> tuple[float, float]:
    """Write a 2-D plane as an 8-bit P5 PGM with min/max normalization.

    Returns (vmin, vmax) so the caller can record them in a sidecar file and
    recover the original scale.
    """
    arr = np.asarray(plane.data if isinstance(plane, Tensor) else plane, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D plane, got shape {arr.shape}")
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax > vmin:
        scaled = np.round((arr - vmin) / (vmax - vmin) * 255.0)
    else:
        scaled = np.zeros_like(arr)
    pixels = scaled.astype(np.uint8)
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return vmin, vmax


def write_manifest(path, entries: dict):
    """Write key=value lines in insertion order."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_manifest(path) -> dict:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"read_manifest: malformed line {lineno} in {path}: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries
