"""Flat binary container for named float64 arrays.

Layout (all integers little-endian)::

    b"STLC"  u32 version
    repeated until EOF:
        u32 name_length, name (UTF-8), u32 rank, u64 extent * rank,
        float64 data (little-endian, row-major)
"""
import struct

import numpy as np

MAGIC = b"STLC"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(arrays):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in arrays.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob):
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes, not an STLC container")
    if len(blob) < 8:
        raise CheckpointFormatError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported container version {version}")
    pos = 8
    arrays = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointFormatError(f"truncated data for {name!r}")
            arrays[name] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
            pos = end
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated record at byte {pos}") from exc
    return arrays


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
