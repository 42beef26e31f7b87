"""Binary container for configs plus named arrays, with a content hash.

Layout (little-endian throughout):

    magic   4 bytes
    version u8
    hash    u64   -- first 8 bytes of sha256(body)
    body:
        config_len u32, canonical-JSON config bytes
        count      u32
        per array: name_len u16, utf-8 name, dtype u8, rank u8,
                   dims u64 x rank, raw row-major payload

The u64 hash is the pairing key between bitstreams and the model/quantizer
files that produced them.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError

MODEL_MAGIC = b"VCNM"
QUANTIZER_MAGIC = b"VCNQ"
VERSION = 1

_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.uint8, 3: np.int64}
_CODE_FOR = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _pack_body(config, arrays):
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise FormatError(f"unsupported dtype {arr.dtype} for array '{name}'")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def body_hash(body):
    return struct.unpack("<Q", hashlib.sha256(body).digest()[:8])[0]


def write_container(path, magic, config, arrays):
    """Serialize and return the container's content hash."""
    body = _pack_body(config, arrays)
    h = body_hash(body)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<BQ", VERSION, h))
        f.write(body)
    return h


def read_container(path, magic):
    """Load (config, arrays, hash); verifies magic, version, and hash."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != magic:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    version, h = struct.unpack_from("<BQ", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    body = raw[13:]
    if body_hash(body) != h:
        raise FormatError("container hash does not match body (corrupt file)")
    off = 0
    (cfg_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = json.loads(body[off : off + cfg_len].decode())
    off += cfg_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode()
        off += name_len
        code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", body, off)
        off += 8 * rank
        dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
        n = int(np.prod(dims)) if rank else 1
        nbytes = n * dtype.itemsize
        arr = np.frombuffer(body[off : off + nbytes], dtype=dtype).reshape(dims)
        arrays[name] = arr.astype(_DTYPE_CODES[code])
        off += nbytes
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes in container")
    return config, arrays, h
