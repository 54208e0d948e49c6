"""Binary persistence for tensors and block parameters.

Tensor record ("NLRB"): magic, version u8 (=1), dtype u8 (0 = binary32,
1 = binary64), reserved u16 (written 0, ignored on read), ndim u32, then
ndim u64 extents, then the payload as little-endian row-major scalars.

Parameter file ("NLRP"): magic, version u8 (=1), count u32, then per entry
a u16 name length, the UTF-8 name, and a full embedded tensor record.

Everything is little-endian. Writers are atomic: data goes to a temp file
in the target directory and is renamed into place, so a failed write never
leaves a partial file behind. Loaders validate every field and never read
past the declared payload; trailing bytes are an error.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .block import PARAM_NAMES, NlRoiParams

BLOB_MAGIC = b"NLRB"
PARAMS_MAGIC = b"NLRP"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_NATIVE = {0: np.float32, 1: np.float64}


class FormatError(ValueError):
    """A persisted record violates the format; the message names the field."""


def encode_blob(t: np.ndarray) -> bytes:
    """Serialize one tensor to the byte layout described above."""
    t = np.asarray(t)
    if t.dtype not in _DTYPE_CODES:
        raise ValueError(f"tensor dtype must be float32 or float64, got {t.dtype}")
    if not 1 <= t.ndim <= 4:
        raise ValueError(f"tensor rank must be 1..4, got {t.ndim}")
    code = _DTYPE_CODES[t.dtype]
    head = BLOB_MAGIC + struct.pack("<BBHI", VERSION, code, 0, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t).astype(_CODE_DTYPES[code], copy=False).tobytes()
    return head + dims + payload


def decode_blob(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record at ``offset``; returns (tensor, end offset)."""
    if len(buf) - offset < 12:
        raise FormatError("header: record shorter than the fixed 12-byte header")
    if buf[offset : offset + 4] != BLOB_MAGIC:
        raise FormatError(
            f"magic: expected {BLOB_MAGIC!r}, got {buf[offset:offset + 4]!r}"
        )
    version, code, _reserved, ndim = struct.unpack_from("<BBHI", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"version: unsupported version {version}, expected {VERSION}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"dtype: unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"ndim: rank must be 1..4, got {ndim}")
    pos = offset + 12
    if len(buf) - pos < 8 * ndim:
        raise FormatError("dims: record truncated inside the extents")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = 1
    for extent in shape:
        count *= extent
    nbytes = count * _CODE_DTYPES[code].itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(
            f"payload: declared {nbytes} bytes but only {len(buf) - pos} present"
        )
    flat = np.frombuffer(buf, dtype=_CODE_DTYPES[code], count=count, offset=pos)
    arr = flat.astype(_NATIVE[code], copy=True).reshape(shape)
    return arr, pos + nbytes


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".nlroi-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_blob(t, path) -> None:
    _atomic_write(path, encode_blob(t))


def load_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_blob(buf)
    if end != len(buf):
        raise FormatError(
            f"payload: {len(buf) - end} trailing bytes after the declared payload"
        )
    return arr


def save_params(params: NlRoiParams, path) -> None:
    chunks = [PARAMS_MAGIC, struct.pack("<BI", VERSION, len(PARAM_NAMES))]
    for name in PARAM_NAMES:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(encode_blob(getattr(params, name)))
    _atomic_write(path, b"".join(chunks))


def load_params(path) -> NlRoiParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 9:
        raise FormatError("header: file shorter than the fixed 9-byte header")
    if buf[:4] != PARAMS_MAGIC:
        raise FormatError(f"magic: expected {PARAMS_MAGIC!r}, got {buf[:4]!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"version: unsupported version {version}, expected {VERSION}")
    pos = 9
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise FormatError("name: record truncated before a name length")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < name_len:
            raise FormatError("name: record truncated inside a name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if name in entries:
            raise FormatError(f"name: duplicate entry {name!r}")
        entries[name], pos = decode_blob(buf, pos)
    if pos != len(buf):
        raise FormatError(f"payload: {len(buf) - pos} trailing bytes after the entries")
    if set(entries) != set(PARAM_NAMES):
        raise FormatError(
            f"name: entries must be exactly {sorted(PARAM_NAMES)}, "
            f"got {sorted(entries)}"
        )
    return NlRoiParams.from_dict(entries)
