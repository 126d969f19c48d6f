"""Binary container for named float64/complex128 tensors plus a JSON manifest.

Layout (all integers little-endian):

    magic   4 bytes  b"PCNO"
    version u16
    mlen    u32      manifest byte length
    manifest         UTF-8 JSON
    count   u32      number of tensor records
    record*          see below

    record := nlen u16 | name UTF-8 | dtype u8 (0=float64, 1=complex128)
              | ndim u8 | dims u32[ndim] | payload | crc u32 (crc32 of payload)

Files are written atomically (temp file in the same directory, then rename),
so a reader never observes a partially written container.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"PCNO"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


class ContainerError(IOError):
    """Base class for container I/O failures."""


class ContainerFormatError(ContainerError):
    """Bad magic bytes, truncated data, or malformed structure."""


class ContainerVersionError(ContainerError):
    """Unknown format version."""


class ContainerChecksumError(ContainerError):
    """Payload CRC mismatch."""


def write_container(path, manifest: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Write manifest + tensors; atomic against concurrent readers."""
    path = os.fspath(path)
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(prefix=".pcno-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<H", VERSION))
            fh.write(struct.pack("<I", len(manifest_bytes)))
            fh.write(manifest_bytes)
            fh.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                arr = np.asarray(arr)
                if arr.dtype not in _DTYPE_CODES:
                    raise ValueError(f"record {name!r}: unsupported dtype {arr.dtype}")
                name_bytes = name.encode("utf-8")
                if len(name_bytes) > 0xFFFF:
                    raise ValueError(f"record name too long: {name!r}")
                payload = np.ascontiguousarray(arr).tobytes()
                fh.write(struct.pack("<H", len(name_bytes)))
                fh.write(name_bytes)
                fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(payload)
                fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ContainerFormatError(f"{self.path}: truncated container")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (manifest, tensors); raises a distinct error per failure mode."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic bytes")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise ContainerVersionError(f"{path}: unknown format version {version}")
    (mlen,) = r.unpack("<I")
    try:
        manifest = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: bad manifest: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise ContainerFormatError(f"{path}: record {name!r}: bad dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim \
            else dtype.itemsize
        payload = r.take(nbytes)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ContainerChecksumError(f"{path}: record {name!r}: checksum mismatch")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.pos != len(blob):
        raise ContainerFormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return manifest, tensors
