"""Bit-exact checkpoint files.

Layout (all little-endian)::

    "OLRC" | version u32 | role u8 | record count u32
    per record: name_len u16 | name utf-8 | dtype u8 | rows u64 | cols u64 | payload
    CRC32 u32 of every preceding byte

Adapter checkpoints carry their config echo as a trailing ``config`` record:
a 1x5 f64 row ``[method, rank, scale, seed_hi, seed_lo]`` (method 0 = lora,
1 = olora; the seed is split into two exact 32-bit halves).
"""

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CorruptionError, FormatError, NumericError, TruncationError

MAGIC = b"OLRC"
VERSION = 1
ROLES = {"base": 0, "adapter": 1}
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CONFIG_RECORD = "config"
METHOD_CODES = {"lora": 0, "olora": 1}
_HEADER = struct.Struct("<4sIBI")
_RECORD = struct.Struct("<BQQ")


@dataclass
class Checkpoint:
    role: str
    records: dict = field(default_factory=dict)
    config: Optional[dict] = None


def _dtype_code(arr):
    if arr.dtype == np.float32:
        return 0
    if arr.dtype == np.float64:
        return 1
    raise FormatError(f"unsupported dtype {arr.dtype}")


def _config_row(config):
    seed = int(config["seed"])
    return np.array([[METHOD_CODES[config["method"]], config["rank"], config["scale"],
                      seed >> 32, seed & 0xFFFFFFFF]], dtype=np.float64)


def _config_from_row(row):
    method = {v: k for k, v in METHOD_CODES.items()}.get(int(row[0]))
    if method is None:
        raise FormatError(f"unknown method code {row[0]}")
    return {"method": method, "rank": int(row[1]), "scale": float(row[2]),
            "seed": (int(row[3]) << 32) | int(row[4])}


def encode(ckpt):
    if ckpt.role not in ROLES:
        raise FormatError(f"unknown role {ckpt.role!r}")
    records = dict(ckpt.records)
    if ckpt.config is not None:
        records[CONFIG_RECORD] = _config_row(ckpt.config)
    parts = [_HEADER.pack(MAGIC, VERSION, ROLES[ckpt.role], len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise FormatError(f"{name}: records must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{name}: refusing to write non-finite values")
        code = _dtype_code(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(_RECORD.pack(code, arr.shape[0], arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_checkpoint(path, ckpt):
    """Write atomically: temp file in the target directory, then rename."""
    blob = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse(blob):
    """Walk the record structure; returns (role, records, end offset)."""
    magic, version, role, count = _HEADER.unpack_from(blob, 0)
    off = _HEADER.size
    records = {}
    for _ in range(count):
        if off + 2 > len(blob):
            raise TruncationError("file ends inside a record header")
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + n + _RECORD.size > len(blob):
            raise TruncationError("file ends inside a record header")
        try:
            name = blob[off:off + n].decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError("record name is not valid UTF-8") from None
        off += n
        code, rows, cols = _RECORD.unpack_from(blob, off)
        off += _RECORD.size
        if code not in DTYPES:
            raise CorruptionError(f"{name}: unknown dtype code {code}")
        size = rows * cols * DTYPES[code].itemsize
        if off + size > len(blob):
            raise TruncationError(f"{name}: payload runs past end of file")
        arr = np.frombuffer(blob, dtype=DTYPES[code], count=rows * cols, offset=off)
        records[name] = arr.reshape(rows, cols).astype(DTYPES[code].newbyteorder("="))
        off += size
    return role, records, off


def decode(blob):
    if len(blob) < _HEADER.size + 4:
        raise TruncationError(f"file is {len(blob)} bytes, shorter than an empty checkpoint")
    magic, version, role, _ = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored:
        # a structure that needs more bytes than exist is a truncation, anything else corruption
        try:
            _parse(blob[:-4])
        except TruncationError:
            raise
        except Exception:
            pass
        raise CorruptionError("CRC32 mismatch")
    role_code, records, end = _parse(blob[:-4])
    if end != len(blob) - 4:
        raise FormatError(f"{len(blob) - 4 - end} unexpected trailing bytes")
    roles = {v: k for k, v in ROLES.items()}
    if role_code not in roles:
        raise FormatError(f"unknown role code {role_code}")
    config = None
    if CONFIG_RECORD in records:
        config = _config_from_row(records.pop(CONFIG_RECORD)[0])
    return Checkpoint(roles[role_code], records, config)


def read_checkpoint(path):
    with open(path, "rb") as f:
        return decode(f.read())
