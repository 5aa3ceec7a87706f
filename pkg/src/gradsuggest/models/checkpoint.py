"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"GGMD" | u32 version
    u32 n_entries, then per entry:
        u16 key length | key bytes | u8 type tag | value
        (tag 0: i64, tag 1: f64, tag 2: u32 length + UTF-8 bytes)
    u32 n_tensors, then per tensor:
        u32 name length | name bytes | u32 rank | rank x u32 extents | f64 values
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..exceptions import ChecksumError, FormatError, TruncationError
from .unet import SegModel
from .vae import VaeModel

MAGIC = b"GGMD"
VERSION = 1

_TAG_INT, _TAG_FLOAT, _TAG_STR = 0, 1, 2


def _encode_descriptor(desc: dict) -> bytes:
    parts = [struct.pack("<I", len(desc))]
    for key in sorted(desc):
        value = desc[key]
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb)
        if isinstance(value, bool) or isinstance(value, (int, np.integer)):
            parts.append(struct.pack("<Bq", _TAG_INT, int(value)))
        elif isinstance(value, float):
            parts.append(struct.pack("<Bd", _TAG_FLOAT, value))
        else:
            vb = str(value).encode("utf-8")
            parts.append(struct.pack("<BI", _TAG_STR, len(vb)) + vb)
    return b"".join(parts)


def dumps(model) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), _encode_descriptor(model.descriptor)]
    out.append(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.asarray(model.params[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"unexpected end of checkpoint (need {n} bytes)", self.path, self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes, path=None):
    """Parse checkpoint bytes back into a :class:`VaeModel` or :class:`SegModel`."""
    if len(buf) < 12:
        raise TruncationError("checkpoint shorter than its fixed header", path, len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", path, 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch", path, len(body))

    r = _Reader(body, path)
    r.pos = 8
    desc = {}
    (n_entries,) = r.unpack("<I")
    for _ in range(n_entries):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        start = r.pos
        (tag,) = r.unpack("<B")
        if tag == _TAG_INT:
            (desc[key],) = r.unpack("<q")
        elif tag == _TAG_FLOAT:
            (desc[key],) = r.unpack("<d")
        elif tag == _TAG_STR:
            (vlen,) = r.unpack("<I")
            desc[key] = r.take(vlen).decode("utf-8")
        else:
            raise FormatError(f"unknown descriptor type tag {tag}", path, start)
    params = {}
    (n_tensors,) = r.unpack("<I")
    for _ in range(n_tensors):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise FormatError("trailing bytes after tensor table", path, r.pos)

    kind = desc.get("kind")
    if kind == "vae":
        channels = tuple(int(c) for c in str(desc["channels"]).split(","))
        return VaeModel(params, (int(desc["height"]), int(desc["width"])), int(desc["latent_dim"]), channels).with_params(params)
    if kind == "unet":
        return SegModel(params, int(desc["base_channels"]), int(desc["depth"])).with_params(params)
    raise FormatError(f"unknown model kind {kind!r}", path, 8)


def save_model(model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path):
    path = Path(path)
    return loads(path.read_bytes(), path)
