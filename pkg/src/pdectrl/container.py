"""Binary container for named arrays plus ``key=value`` metadata.

Layout (little-endian)::

    b"PDEC" | u8 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 ndim
              | ndim x u64 dims | row-major payload )
    u32 meta_len | meta utf-8 ("key=value" lines)
"""
from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"PDEC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    metadata = metadata or {}
    for k, v in metadata.items():
        if "\n" in str(k) or "=" in str(k) or "\n" in str(v):
            raise ContainerError(f"metadata entry {k!r} cannot contain '=' in key or newlines")
    meta = "".join(f"{k}={v}\n" for k, v in metadata.items())
    raw = meta.encode("utf-8")
    parts.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(f"truncated container: wanted {n} bytes at offset {self.pos}, "
                                 f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ContainerError("not a PDEC container (bad magic)")
    version, count = r.unpack("<BI")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if name in arrays:
            raise ContainerError(f"duplicate entry name {name!r}")
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).copy()
    (mlen,) = r.unpack("<I")
    meta: dict[str, str] = {}
    for line in r.take(mlen).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    if r.pos != len(buf):
        raise ContainerError(f"{len(buf) - r.pos} trailing bytes after metadata")
    return arrays, meta


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write-temp-then-rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> None:
    atomic_write(path, encode(arrays, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())
