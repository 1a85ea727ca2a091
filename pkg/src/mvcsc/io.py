"""CSCT tensor files: a tiny binary format for signals, atoms and codes.

Layout, all little-endian:

    bytes 0-3   magic b"CSCT"
    byte  4     format version, currently 1
    byte  5     number of dimensions (ndim)
    next        ndim * 8-byte unsigned dimension sizes
    rest        row-major IEEE-754 float64 payload
"""

import struct

import numpy as np

MAGIC = b"CSCT"
VERSION = 1


def write_csct(path, array):
    """Write ``array`` to ``path`` in CSCT format (float64, row-major)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError("unsupported number of dimensions: %d" % arr.ndim)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, arr.ndim))
        fh.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_csct(path):
    """Read a CSCT tensor file back into a float64 ndarray."""
    with open(path, "rb") as fh:
        header = fh.read(6)
        if len(header) < 6 or header[:4] != MAGIC:
            raise ValueError("%s: not a CSCT file" % (path,))
        version, ndim = struct.unpack("<BB", header[4:6])
        if version != VERSION:
            raise ValueError("%s: unsupported CSCT version %d" % (path, version))
        dims = struct.unpack("<%dQ" % ndim, fh.read(8 * ndim))
        count = int(np.prod(dims)) if ndim else 0
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("%s: truncated payload" % (path,))
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
