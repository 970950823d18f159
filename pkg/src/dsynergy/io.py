"""DST1 tensor files and parameter-bundle directories.

Layout: ``b"DST1"``, one dtype byte (0x01 float32, 0x02 float64), four
little-endian uint32 extents B, C, H, W, then the row-major payload in
little-endian order. No padding and no checksum.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DST1"
HEADER_SIZE = 21
DTYPES = {0x01: np.dtype("<f4"), 0x02: np.dtype("<f8")}
_TAGS = {np.dtype("<f4"): 0x01, np.dtype("<f8"): 0x02}
MANIFEST = "manifest.txt"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_tensor(x: np.ndarray, dtype: str = "f8") -> bytes:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"DST1 stores rank-4 tensors, got shape {x.shape}")
    dt = np.dtype(dtype).newbyteorder("<")
    tag = _TAGS.get(dt)
    if tag is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header = MAGIC + bytes([tag]) + struct.pack("<4I", *x.shape)
    return header + np.ascontiguousarray(x, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse a DST1 payload; always returns float64."""
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    dt = DTYPES.get(buf[4])
    if dt is None:
        raise FormatError(f"unknown dtype tag 0x{buf[4]:02x}", 4)
    dims = struct.unpack("<4I", buf[5:HEADER_SIZE])
    for i, v in enumerate(dims):
        if v == 0:
            raise FormatError("zero extent", 5 + 4 * i)
    count = 1
    for v in dims:
        count *= v
    need = count * dt.itemsize
    # Python ints cannot overflow, so this also catches absurd extents
    if need > len(buf) - HEADER_SIZE:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(buf) - HEADER_SIZE}", len(buf)
        )
    if need < len(buf) - HEADER_SIZE:
        raise FormatError("trailing bytes after payload", HEADER_SIZE + need)
    data = np.frombuffer(buf, dtype=dt, count=count, offset=HEADER_SIZE)
    return data.astype(np.float64).reshape(dims)


def save_tensor(x: np.ndarray, path, dtype: str = "f8") -> None:
    Path(path).write_bytes(encode_tensor(x, dtype))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _as_rank4(a: np.ndarray) -> np.ndarray:
    # vectors are stored as (1, n, 1, 1), matrices as (r, c, 1, 1)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 4:
        return a
    if a.ndim == 1:
        return a.reshape(1, -1, 1, 1)
    if a.ndim == 2:
        return a.reshape(*a.shape, 1, 1)
    raise ValueError(f"cannot store rank-{a.ndim} parameter")


def save_bundle(params: Mapping[str, np.ndarray], directory) -> None:
    """Write one DST1 file per parameter plus a ``name=relative-path`` manifest.

    Manifest order is the mapping's iteration order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(params.items()):
        rel = f"{i:03d}_{name.replace('/', '_')}.dst"
        save_tensor(_as_rank4(arr), d / rel)
        lines.append(f"{name}={rel}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bundle(directory, shapes: Mapping[str, tuple] | None = None) -> dict[str, np.ndarray]:
    """Read a bundle back in manifest order.

    Pass ``shapes`` to restore the original (non rank-4) parameter shapes.
    """
    d = Path(directory)
    out: dict[str, np.ndarray] = {}
    for line in (d / MANIFEST).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, _, rel = line.partition("=")
        arr = load_tensor(d / rel)
        if shapes is not None and name in shapes:
            arr = arr.reshape(shapes[name])
        out[name] = arr
    return out
