"""Binary checkpoint format: versioned header plus named float64 blobs.

Layout: magic ``SPDETCK``, u32 version, u32 tensor count, then per tensor a
u16 name length, the utf-8 name, a u8 dtype tag (0 = float64), a u8 rank,
u32 dims, and the little-endian payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError, VersionError

MAGIC = b"SPDETCK"
VERSION = 1
_DTYPE_F64 = 0


def save_checkpoint(path, named_tensors):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(named_tensors)))
        for name, tensor in named_tensors.items():
            data = np.ascontiguousarray(
                tensor.data if hasattr(tensor, "data") else tensor, dtype="<f8"
            )
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_F64, data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exactly(f, n, path, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ParseError(f"{path}: truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise VersionError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, count = struct.unpack("<II", _read_exactly(f, 8, path, "header"))
        if version != VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
        blobs = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exactly(f, 2, path, f"name {i}"))
            name = _read_exactly(f, name_len, path, f"name {i}").decode("utf-8")
            dtype_tag, ndim = struct.unpack("<BB", _read_exactly(f, 2, path, name))
            if dtype_tag != _DTYPE_F64:
                raise VersionError(f"{path}: unknown dtype tag {dtype_tag} for {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exactly(f, 4 * ndim, path, name))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
            payload = _read_exactly(f, n_bytes, path, name)
            blobs[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return blobs


def load_into_params(params, blobs, path="checkpoint"):
    """Strictly restore named parameters; any name or shape drift is a
    version error."""
    missing = sorted(set(params) - set(blobs))
    extra = sorted(set(blobs) - set(params))
    if missing or extra:
        raise VersionError(
            f"{path}: parameter names do not match (missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, p in params.items():
        if blobs[name].shape != p.data.shape:
            raise VersionError(
                f"{path}: {name} has shape {blobs[name].shape}, model expects {p.data.shape}"
            )
        p.data[...] = blobs[name]
