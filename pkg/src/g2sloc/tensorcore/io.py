"""CVT1 tensor files and checkpoint directories.

CVT1 layout: magic bytes ``CVT1``, little-endian u32 rank, rank little-endian
u64 dims, then row-major little-endian float32 payload.  Internal float64
values are narrowed on save.

A checkpoint is a directory of ``<name>.cvt1`` files plus ``manifest.txt``
with one ``<name> <d0>x<d1>x...`` line per tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import G2SLocError

MAGIC = b"CVT1"


def save_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise G2SLocError(f"{path}: not a CVT1 file (magic {raw[:4]!r})")
    rank = struct.unpack_from("<I", raw, 4)[0]
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise G2SLocError(f"{path}: truncated payload ({data.size} of {count} values)")
    return data.astype(np.float64).reshape(dims)


def save_checkpoint(directory, tensors: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        save_tensor(directory / f"{name}.cvt1", tensors[name])
        dims = "x".join(str(d) for d in np.asarray(tensors[name]).shape)
        lines.append(f"{name} {dims or 'scalar'}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise G2SLocError(f"{directory}: missing manifest.txt")
    tensors = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, dims = line.rsplit(" ", 1)
        array = load_tensor(directory / f"{name}.cvt1")
        expected = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        if array.shape != expected:
            raise G2SLocError(f"{name}: manifest says {expected}, file has {array.shape}")
        tensors[name] = array
    return tensors
