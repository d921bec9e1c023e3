"""Binary parameter checkpoints.

Layout (little endian): ``b"MTCK"``, u32 version, then for every parameter
in sorted-name order: u32 name length, utf-8 name, u32 rank, rank x u32
dims, float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params):
    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    for name in sorted(params):
        value = np.asarray(params[name])
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    return bytes(out)


def loads(data):
    if data[:4] != MAGIC:
        raise CheckpointError("not an MTCK checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, params = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"payload of {name!r} truncated")
            params[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return params


def save(path, model):
    with open(path, "wb") as f:
        f.write(dumps({name: p.data for name, p in model.parameters().items()}))


def load_into(path_or_bytes, model):
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else open(path_or_bytes, "rb").read()
    params = loads(data)
    own = model.parameters()
    if set(params) != set(own):
        missing, extra = set(own) - set(params), set(params) - set(own)
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, value in params.items():
        if own[name].shape != value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model {own[name].shape}")
        own[name].data[...] = value
    return model
