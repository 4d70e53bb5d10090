"""Little-endian binary containers for weights and class statistics.

Layout shared by both files::

    magic        4 bytes   (b"SDCW" weights, b"SDCS" statistics)
    version      u16
    header_len   u32, then header_len bytes of UTF-8 "key=value" lines
    count        u32 tensors, each:
        name_len u16, name (UTF-8), ndim u8, dims u64 * ndim, data f64 * prod(dims)

The header always carries ``fingerprint=...`` so a reload against a different
configuration is detected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VERSION = 1


class SnapshotError(ValueError):
    pass


class FingerprintMismatch(SnapshotError):
    pass


def encode_header(fields: dict[str, object]) -> bytes:
    lines = []
    for k, v in fields.items():
        s = str(v)
        if "\n" in s or "=" in k:
            raise SnapshotError(f"header field {k!r} is not representable")
        lines.append(f"{k}={s}")
    return "\n".join(lines).encode("utf-8")


def decode_header(raw: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    text = raw.decode("utf-8")
    for line in text.split("\n") if text else []:
        k, _, v = line.partition("=")
        out[k] = v
    return out


def write_tensors(path, magic: bytes, header: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += magic
    buf += struct.pack("<H", VERSION)
    hdr = encode_header(header)
    buf += struct.pack("<I", len(hdr)) + hdr
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotError(f"{self.path}: truncated at byte offset {self.pos} (needed {n} more bytes)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(
    path, magic: bytes, expected_fingerprint: str | None = None
) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    got = r.take(4)
    if got != magic:
        raise SnapshotError(f"{path}: bad magic {got!r} at byte offset 0, expected {magic!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise SnapshotError(f"{path}: unsupported version {version}")
    (hlen,) = r.unpack("<I")
    header = decode_header(r.take(hlen))
    if expected_fingerprint is not None and header.get("fingerprint") != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: fingerprint {header.get('fingerprint')!r} does not match {expected_fingerprint!r}"
        )
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if r.pos != len(r.data):
        raise SnapshotError(f"{path}: {len(r.data) - r.pos} trailing bytes at offset {r.pos}")
    return header, tensors
