"""Reader and writer for PNDF feature files.

The image-side extractor writes its embeddings through `write`, and the
Rust engine reads them back. Layout, all little-endian:

    b"PNDF"  u32 version=1  u64 n  u64 d  u8 flags (bit 0: labels)
    n*d f32 values, row-major
    n i32 labels if flagged
"""

import struct
import sys

MAGIC = b"PNDF"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")


def write(path, rows, labels=None):
    """Writes `rows` (a sequence of equal-length float sequences)."""
    n = len(rows)
    if n == 0:
        raise ValueError("no rows")
    d = len(rows[0])
    if d == 0 or any(len(r) != d for r in rows):
        raise ValueError("rows must be non-empty and of equal length")
    if labels is not None and len(labels) != n:
        raise ValueError("one label per row")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, d, 1 if labels is not None else 0))
        for r in rows:
            f.write(struct.pack(f"<{d}f", *r))
        if labels is not None:
            f.write(struct.pack(f"<{n}i", *labels))


def read(path):
    """Returns `(rows, labels)`; labels is None when absent."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, version, n, d, flags = _HEADER.unpack_from(buf)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not a PNDF v{VERSION} file")
    off = _HEADER.size
    vals = struct.unpack_from(f"<{n * d}f", buf, off)
    off += 4 * n * d
    labels = None
    if flags & 1:
        labels = list(struct.unpack_from(f"<{n}i", buf, off))
        off += 4 * n
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return [list(vals[i * d:(i + 1) * d]) for i in range(n)], labels


if __name__ == "__main__":
    # demo output: pndf.py OUT N D writes a deterministic labelled file
    out, n, d = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    write(out, [[(i * d + j) / 8.0 for j in range(d)] for i in range(n)], [i % 10 for i in range(n)])
