"""Binary checkpoint persistence.

Layout: magic ``G2SDCKPT``, u32 format version, u32-length UTF-8 metadata
block (flat key=value lines), a named tensor table (u16 name length, name,
u8 dtype code, u8 ndim, u32 dims, little-endian float32 payload), and a
trailing CRC32 over everything between the magic and the checksum.

Round trips are bit-exact; any flipped payload byte fails the checksum.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"G2SDCKPT"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this reader."""


class CheckpointIntegrityError(CheckpointError):
    """Stored checksum does not match the payload."""


@dataclass
class Checkpoint:
    """Model metadata plus a flat, duplicate-free named tensor table."""

    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


def _meta_bytes(meta):
    lines = [f"{k}={meta[k]}" for k in meta]
    return "\n".join(lines).encode("utf-8")


def _parse_meta(blob):
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def save_checkpoint(path, ckpt: Checkpoint):
    """Write a checkpoint; tensors must be float32 for bit-exact round trips."""
    body = bytearray()
    body += struct.pack("<I", VERSION)
    meta = _meta_bytes(ckpt.meta)
    body += struct.pack("<I", len(meta)) + meta
    body += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"tensor {name!r} has dtype {arr.dtype}; checkpoints store float32"
            )
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<BB", _DTYPE_F32, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob, offset):
        self.blob = blob
        self.offset = offset

    def take(self, n, what):
        end = self.offset + n
        if end > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        piece = self.blob[self.offset:end]
        self.offset = end
        return piece

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    reader = _Reader(blob, len(MAGIC))
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} not supported (reader handles {VERSION})"
        )
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[len(MAGIC):-4]) != stored_crc:
        raise CheckpointIntegrityError("checksum mismatch; file is corrupt")
    (meta_len,) = reader.unpack("<I", "metadata length")
    meta = _parse_meta(reader.take(meta_len, "metadata"))
    (count,) = reader.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        code, ndim = reader.unpack("<BB", "tensor header")
        if code != _DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
        shape = reader.unpack(f"<{ndim}I", "tensor shape")
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if ndim else 4
        payload = reader.take(n_bytes, f"tensor {name!r} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return Checkpoint(meta=meta, tensors=tensors)
