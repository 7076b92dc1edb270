"""Binary snapshots of block-structured fields.

Layout (all little-endian):

    offset  size  content
    0       4     magic b"PFD1"
    4       4     u32 format version (currently 1)
    8       1     u8 bytes per scalar: 4 (single) or 8 (double)
    9       1     u8 spatial dimension d
    10      2     u16 block count B
    12      8     f64 simulation time
    20      -     B block headers: d x u32 cell resolution, u32 components
    -       -     payload: per block, C-order array of res x components
    -4      4     u32 zlib.crc32 of the payload bytes

Writes are atomic (temp file in the target directory, then rename), and
reads verify magic, version, sizes, and the payload checksum. A dump's
precision is preserved exactly: single-precision payloads come back as
float32, never silently upcast.
"""

import os
import struct
import tempfile
import zlib

import numpy as np

__all__ = ["write_fields", "read_fields", "dump_state", "load_state",
           "DumpError"]

MAGIC = b"PFD1"
VERSION = 1
_HEAD = struct.Struct("<4sIBBHd")


class DumpError(IOError):
    """Malformed, truncated, or corrupted field dump."""


def write_fields(path, blocks, time=0.0, precision="double"):
    """Write per-block arrays (each shaped resolution + (components,)).

    ``precision`` selects the stored scalar width; the in-memory arrays
    are cast on write. Returns the byte count written.
    """
    if precision not in ("double", "single"):
        raise ValueError("precision must be 'double' or 'single'")
    dtype = np.dtype("<f8" if precision == "double" else "<f4")
    arrays = [np.ascontiguousarray(np.asarray(b), dtype=dtype)
              for b in blocks]
    if not arrays:
        raise ValueError("refusing to write a dump with no blocks")
    dim = arrays[0].ndim - 1
    if dim < 1:
        raise ValueError("block arrays need shape resolution + (components,)")
    for a in arrays:
        if a.ndim != dim + 1:
            raise ValueError("blocks disagree on dimensionality")
        if a.size == 0:
            raise ValueError("refusing to write an empty block")

    head = _HEAD.pack(MAGIC, VERSION, dtype.itemsize, dim, len(arrays),
                      float(time))
    blockhead = b"".join(
        struct.pack(f"<{dim}I", *a.shape[:-1]) + struct.pack("<I",
                                                             a.shape[-1])
        for a in arrays)
    payload = b"".join(a.tobytes(order="C") for a in arrays)
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(head)
            fh.write(blockhead)
            fh.write(payload)
            fh.write(crc)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(head) + len(blockhead) + len(payload) + 4


def read_fields(path):
    """Read a dump back. Returns (blocks, time, precision)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size + 4:
        raise DumpError(f"{path}: truncated header")
    magic, version, width, dim, nblocks, time = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DumpError(f"{path}: not a field dump (bad magic)")
    if version != VERSION:
        raise DumpError(f"{path}: unsupported dump version {version}")
    if width not in (4, 8):
        raise DumpError(f"{path}: bad scalar width {width}")
    off = _HEAD.size
    shapes = []
    for _ in range(nblocks):
        need = 4 * (dim + 1)
        if off + need > len(raw):
            raise DumpError(f"{path}: truncated block table")
        vals = struct.unpack_from(f"<{dim + 1}I", raw, off)
        off += need
        shapes.append(vals)
    dtype = np.dtype("<f8" if width == 8 else "<f4")
    total = sum(int(np.prod(s)) for s in shapes) * width
    if off + total + 4 != len(raw):
        raise DumpError(f"{path}: payload size mismatch "
                        f"(expected {off + total + 4}, got {len(raw)})")
    payload = raw[off:off + total]
    (crc,) = struct.unpack_from("<I", raw, off + total)
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise DumpError(f"{path}: payload checksum mismatch")
    blocks = []
    pos = 0
    for s in shapes:
        cnt = int(np.prod(s))
        arr = np.frombuffer(payload, dtype=dtype, count=cnt,
                            offset=pos).reshape(s).copy()
        pos += cnt * width
        blocks.append(arr)
    precision = "double" if width == 8 else "single"
    return blocks, time, precision


def dump_state(path, domain, field, time=0.0, precision="double"):
    """Write a flat (n, c) or (n,) cell field as per-block arrays."""
    arr = np.asarray(field)
    if arr.ndim == 1:
        arr = arr[:, None]
    blocks = [domain.block_view(arr, b)
              for b in range(len(domain.block_shapes))]
    return write_fields(path, blocks, time=time, precision=precision)


def load_state(path, domain):
    """Read a dump written by ``dump_state`` back into a flat (n, c) array.

    The returned dtype matches the stored precision.
    """
    blocks, time, precision = read_fields(path)
    if len(blocks) != len(domain.block_shapes):
        raise DumpError(f"{path}: dump has {len(blocks)} blocks, domain has "
                        f"{len(domain.block_shapes)}")
    for arr, shape in zip(blocks, domain.block_shapes):
        if arr.shape[:-1] != tuple(shape):
            raise DumpError(f"{path}: block resolution {arr.shape[:-1]} does "
                            f"not match domain block {tuple(shape)}")
    ncomp = blocks[0].shape[-1]
    out = np.empty((domain.n, ncomp), dtype=blocks[0].dtype)
    for b, arr in enumerate(blocks):
        sl = slice(domain.offsets[b], domain.offsets[b + 1])
        out[sl] = arr.reshape(-1, ncomp)
    return out, time, precision
