"""NFT1 tensor files and MFCK checkpoint containers (little-endian)."""
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"NFT1"
CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1
MAX_DIM = 1 << 31


def encode_tensor(t):
    t = np.asarray(t)
    if t.ndim == 0:
        raise FormatError("0-dimensional tensors are not representable")
    header = TENSOR_MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor from ``buf`` at ``offset``; return (array, next_offset)."""
    if len(buf) - offset < 8:
        raise FormatError("truncated tensor header", offset)
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    (ndim,) = struct.unpack_from("<I", buf, offset + 4)
    if ndim == 0:
        raise FormatError("declared 0-dimensional shape", offset + 4)
    if ndim > 32:
        raise FormatError(f"ndim {ndim} exceeds limit", offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated shape", pos)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero-length dimension", pos + 4 * i)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_DIM:
            raise FormatError("element count overflow", pos)
    pos += 4 * ndim
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return data.reshape(dims), pos + nbytes


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor_file(path, t):
    atomic_write_bytes(path, encode_tensor(t))


def read_tensor_file(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor payload", end)
    return t


def encode_checkpoint(tensors):
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    parts.extend(encode_tensor(t) for t in tensors)
    return b"".join(parts)


def decode_checkpoint(buf):
    if len(buf) < 6:
        raise FormatError("truncated checkpoint header", 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors = []
    pos = 6
    while pos < len(buf):
        t, pos = decode_tensor(buf, pos)
        tensors.append(t)
    return tensors
