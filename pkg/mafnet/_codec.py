"""Byte-level layouts of the HSD cube file and the MAFW weight file.

Both formats are little-endian and carry float32 payloads, so a write/read
cycle reproduces every value bit for bit.
"""

import json
import struct
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

HSD_MAGIC = b"HSDC"
HSD_VERSION = 1
HSD_DTYPE_FLOAT32 = 0
# magic, version, dtype code, reserved, bands, height, width
_HSD_HEADER = struct.Struct("<4sBBH3I")
HSD_HEADER_SIZE = _HSD_HEADER.size

MAFW_MAGIC = b"MAFW"
MAFW_VERSION = 1
# magic, version, 3 reserved bytes, config length
_MAFW_HEADER = struct.Struct("<4sB3xI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")

_F32 = np.dtype("<f4")


def encode_hsd(data: np.ndarray) -> bytes:
    """Serialize a (bands, height, width) array into an HSD byte string."""
    bands, height, width = data.shape
    header = _HSD_HEADER.pack(
        HSD_MAGIC, HSD_VERSION, HSD_DTYPE_FLOAT32, 0, bands, height, width
    )
    return header + np.ascontiguousarray(data, dtype=_F32).tobytes()


def decode_hsd(raw: bytes) -> np.ndarray:
    """Parse an HSD byte string into a (bands, height, width) float32 array.

    Raises :exc:`FormatError` for a bad magic, unknown version or dtype, or a
    payload whose length disagrees with the header.
    """
    if len(raw) < HSD_HEADER_SIZE:
        raise FormatError(
            "HSD header is truncated: %d bytes, expected %d." % (len(raw), HSD_HEADER_SIZE)
        )
    magic, version, dtype, reserved, bands, height, width = _HSD_HEADER.unpack_from(raw)
    if magic != HSD_MAGIC:
        raise FormatError("Bad HSD magic %r." % magic)
    if version != HSD_VERSION:
        raise FormatError("Unsupported HSD version %d." % version)
    if dtype != HSD_DTYPE_FLOAT32:
        raise FormatError("Unsupported HSD dtype code %d." % dtype)
    if reserved != 0:
        raise FormatError("HSD reserved bytes must be zero.")
    expected = bands * height * width * _F32.itemsize
    payload = raw[HSD_HEADER_SIZE:]
    if len(payload) != expected:
        raise FormatError(
            "HSD payload has %d bytes, header declares %d." % (len(payload), expected)
        )
    data = np.frombuffer(payload, dtype=_F32).reshape(bands, height, width)
    return data.astype(np.float32)


def encode_mafw(
    config: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray],
    extra: Mapping[str, Any] | None = None,
) -> bytes:
    """Serialize a network config, named float32 tensors and a JSON trailer.

    Records are written sorted by path, so equal weights always give equal
    bytes.
    """
    config_bytes = json.dumps(dict(config), sort_keys=True).encode("utf-8")
    parts = [_MAFW_HEADER.pack(MAFW_MAGIC, MAFW_VERSION, len(config_bytes)), config_bytes]
    parts.append(_U32.pack(len(tensors)))
    for path in sorted(tensors):
        array = np.ascontiguousarray(tensors[path], dtype=_F32)
        encoded_path = path.encode("utf-8")
        parts.append(_U16.pack(len(encoded_path)))
        parts.append(encoded_path)
        parts.append(_U8.pack(array.ndim))
        parts.append(struct.pack("<%dI" % array.ndim, *array.shape))
        parts.append(array.tobytes())
    extra_bytes = json.dumps(dict(extra or {}), sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(extra_bytes)))
    parts.append(extra_bytes)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.raw):
            raise FormatError("MAFW file is truncated at byte %d." % self.offset)
        chunk = self.raw[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))


def decode_mafw(raw: bytes) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Parse a MAFW byte string into ``(config, tensors, extra)``."""
    reader = _Reader(raw)
    magic, version, config_len = reader.unpack(_MAFW_HEADER)
    if magic != MAFW_MAGIC:
        raise FormatError("Bad MAFW magic %r." % magic)
    if version != MAFW_VERSION:
        raise FormatError("Unsupported MAFW version %d." % version)
    config = json.loads(reader.take(config_len).decode("utf-8"))
    (count,) = reader.unpack(_U32)
    tensors = {}
    for _ in range(count):
        (path_len,) = reader.unpack(_U16)
        path = reader.take(path_len).decode("utf-8")
        (ndim,) = reader.unpack(_U8)
        shape = struct.unpack("<%dI" % ndim, reader.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        array = np.frombuffer(reader.take(size), dtype=_F32).reshape(shape)
        tensors[path] = array.astype(np.float32)
    (extra_len,) = reader.unpack(_U32)
    extra = json.loads(reader.take(extra_len).decode("utf-8"))
    if reader.offset != len(raw):
        raise FormatError("MAFW file has %d trailing bytes." % (len(raw) - reader.offset))
    return config, tensors, extra
