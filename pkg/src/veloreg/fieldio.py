"""Raw binary field files with a fixed 64-byte header.

Layout (all integers little-endian ``uint32``)::

    offset  size  content
    0       8     magic b"VRFIELD1"
    8       4     format version (1)
    12      4     components: 1 (scalar) or 3 (vector)
    16      12    n1, n2, n3
    28      4     bytes per value: 4 (float32) or 8 (float64)
    32      1     byte order, always b"<" (little-endian)
    33      8     axis order tag b"c,x1..x3": component slowest, then x1, x2, x3
    41      23    zero padding
    64      ...   payload, C order, components * n1 * n2 * n3 values
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = ["FieldFormatError", "read_field", "write_field", "HEADER_SIZE", "MAGIC"]

MAGIC = b"VRFIELD1"
VERSION = 1
AXIS_TAG = b"c,x1..x3"
HEADER_SIZE = 64
_HEAD = struct.Struct("<8sIIIIII1s8s")


class FieldFormatError(ValueError):
    """The file is not a valid field file."""


def write_field(path, field: np.ndarray) -> None:
    """Write a scalar ``(n1, n2, n3)`` or vector ``(3, n1, n2, n3)`` field."""
    field = np.asarray(field)
    if field.dtype not in (np.float32, np.float64):
        field = field.astype(np.float64)
    if field.ndim == 3:
        ncomp = 1
    elif field.ndim == 4 and field.shape[0] == 3:
        ncomp = 3
    else:
        raise ValueError(f"cannot store field of shape {field.shape}")
    if not np.all(np.isfinite(field)):
        raise ValueError("refusing to write non-finite values")
    n1, n2, n3 = field.shape[-3:]
    head = _HEAD.pack(MAGIC, VERSION, ncomp, n1, n2, n3, field.dtype.itemsize, b"<", AXIS_TAG)
    head += b"\0" * (HEADER_SIZE - len(head))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(field, dtype=field.dtype.newbyteorder("<")).tobytes())


def read_field(path) -> np.ndarray:
    """Read a field file written by :func:`write_field`.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    FieldFormatError
        On a bad header or a payload of the wrong length.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            raise FieldFormatError(f"{path}: header truncated: expected {HEADER_SIZE} bytes, found {len(head)}")
        magic, version, ncomp, n1, n2, n3, nbytes, order, tag = _HEAD.unpack_from(head)
        if magic != MAGIC:
            raise FieldFormatError(f"{path}: bad magic at offset 0: expected {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise FieldFormatError(f"{path}: unsupported version {version} at offset 8")
        if ncomp not in (1, 3):
            raise FieldFormatError(f"{path}: component count {ncomp} at offset 12 is not 1 or 3")
        if min(n1, n2, n3) < 1:
            raise FieldFormatError(f"{path}: invalid dims {(n1, n2, n3)} at offset 16")
        if nbytes not in (4, 8):
            raise FieldFormatError(f"{path}: value size {nbytes} at offset 28 is not 4 or 8")
        if order != b"<" or tag != AXIS_TAG:
            raise FieldFormatError(f"{path}: unsupported byte order {order!r} or axis tag {tag!r} at offset 32")
        expected = ncomp * n1 * n2 * n3 * nbytes
        actual = size - HEADER_SIZE
        if actual != expected:
            raise FieldFormatError(
                f"{path}: payload has {actual} bytes after the {HEADER_SIZE}-byte header, expected {expected}"
            )
        dtype = np.dtype("<f4" if nbytes == 4 else "<f8")
        data = np.frombuffer(fh.read(expected), dtype=dtype).astype(dtype.newbyteorder("="))
    shape = (n1, n2, n3) if ncomp == 1 else (3, n1, n2, n3)
    return data.reshape(shape)
