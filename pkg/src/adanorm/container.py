"""Small binary container for model checkpoints and cached datasets.

Layout (all integers little-endian):

    magic   4 bytes  b"ANRM"
    version u32      currently 1
    clen    u64      byte length of the UTF-8 config text
    config  clen bytes
    then zero or more records:
      nlen    u32      byte length of the record name
      name    nlen bytes (UTF-8)
      kind    4 bytes   record kind tag (e.g. b"TENS", b"DSET")
      dtype   u8        0=float32 1=float64 2=int64
      rank    u32
      dims    rank * u64
      payload prod(dims) * itemsize bytes, C order

Writes are deterministic: identical inputs produce identical bytes, and a
read-then-write round trip is byte-identical. Format violations raise
FormatError carrying the byte offset of the problem.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"ANRM"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_container(path_or_file, config_text, records):
    """Write header, config text, and (name, kind, array) records."""
    buf = io.BytesIO()
    cfg = config_text.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    for name, kind, arr in records:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported array dtype {arr.dtype} for record {name!r}")
        if not isinstance(kind, bytes) or len(kind) != 4:
            raise ValueError("record kind must be exactly 4 bytes")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(kind)
        buf.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.tobytes(order="C"))
    payload = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(payload)
    return len(payload)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated container: needed {n} bytes for {what}, "
                f"{len(self.data) - self.pos} remain",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]


def read_container(path_or_file):
    """Read a container; returns (config_text, [(name, kind, array), ...])."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    clen = r.u64("config length")
    cfg_start = r.pos
    try:
        config_text = r.take(clen, "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"config text is not valid UTF-8: {exc}", offset=cfg_start) from None

    records = []
    while r.pos < len(data):
        nlen = r.u32("record name length")
        name_start = r.pos
        try:
            name = r.take(nlen, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(
                f"record name is not valid UTF-8: {exc}", offset=name_start
            ) from None
        kind = bytes(r.take(4, "record kind"))
        code_at = r.pos
        code = r.u8("dtype code")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=code_at)
        dtype = _CODE_DTYPES[code]
        rank = r.u32("rank")
        dims = tuple(r.u64(f"dim {i}") for i in range(rank))
        count = 1
        for d in dims:
            count *= d
        raw = r.take(count * dtype.itemsize, f"payload of record {name!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        records.append((name, kind, arr))
    return config_text, records
