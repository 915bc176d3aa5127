"""Little-endian binary helpers shared by the on-disk formats."""
import struct

import numpy as np


class FormatError(ValueError):
    pass


def write_header(fh, magic, *ints):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    fh.write(magic)
    fh.write(struct.pack("<" + "Q" * len(ints), *ints))


def read_header(fh, magic, n_ints):
    got = fh.read(8)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    raw = fh.read(8 * n_ints)
    if len(raw) != 8 * n_ints:
        raise FormatError("truncated header")
    return struct.unpack("<" + "Q" * n_ints, raw)


def write_f64(fh, arr, order="C"):
    a = np.asarray(arr, dtype="<f8")
    fh.write(a.tobytes(order=order))


def read_f64(fh, count, shape=None, order="C"):
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError("truncated payload")
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if shape is not None:
        a = a.reshape(shape, order=order)
    return a
