"""Binary array container used for all on-disk artifacts.

Layout (little endian):
    8 bytes   magic ``URLLARR\\0``
    u32       format version (1)
    u32       number of dimensions
    u64 * nd  dimension sizes
    f64 * n   payload, C order

Every array may carry a plain-text sidecar ``<path>.txt`` with one
``key: value`` line per metadata entry.  Writes are atomic (temp file in
the target directory followed by rename).
"""

import os
import struct
import tempfile

import numpy as np

MAGIC = b"URLLARR\x00"
VERSION = 1


class ArrayFormatError(Exception):
    """Raised when a file does not follow the container layout."""


def write_array(path, arr, meta=None):
    """Write ``arr`` as float64 to ``path``; optionally write a metadata sidecar."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack("<%dQ" % arr.ndim, *arr.shape)
    _atomic_write(path, header + arr.tobytes())
    if meta is not None:
        lines = "".join("%s: %s\n" % (k, meta[k]) for k in sorted(meta))
        _atomic_write(str(path) + ".txt", lines.encode("utf-8"))


def read_array(path):
    """Read an array written by :func:`write_array`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ArrayFormatError("bad magic in %s" % path)
    version, ndim = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ArrayFormatError("unsupported version %d" % version)
    dims = struct.unpack_from("<%dQ" % ndim, blob, 16)
    offset = 16 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).copy()


def read_meta(path):
    """Read the sidecar for ``path``; returns {} when absent."""
    sidecar = str(path) + ".txt"
    if not os.path.exists(sidecar):
        return {}
    meta = {}
    with open(sidecar, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition(":")
                meta[key.strip()] = value.strip()
    return meta


def _atomic_write(path, payload):
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-arrayio-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_dense_operator(op, path):
    """Materialize a linear operator as its dense matrix and write it out."""
    dense = op.materialize()
    write_array(path, dense, meta={"kind": "dense_operator",
                                   "rows": dense.shape[0],
                                   "cols": dense.shape[1]})
