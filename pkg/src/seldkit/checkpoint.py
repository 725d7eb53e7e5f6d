"""Binary checkpoint files.

Layout: the 7-byte magic ``SELDCK1`` followed by records until EOF. Each
record is ``u32 name_len, name (utf-8), u32 rank, u32 dims[rank], float32
data`` with all integers and floats little-endian. Records cover model
parameters, batch-norm running statistics (plus their update counters),
feature standardization statistics, and optimizer state; the consumer tells
them apart by name prefix.
"""

import struct

import numpy as np

MAGIC = b"SELDCK1"


def write_records(path, records):
    """Write an ordered mapping of name -> ndarray (cast to float32)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in records.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_records(path):
    """Read a checkpoint back as an ordered dict of name -> float32 ndarray."""
    records = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic): {path}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise ValueError(f"truncated checkpoint: {path}")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * count)
            if len(payload) < 4 * count:
                raise ValueError(f"truncated checkpoint record {name!r}: {path}")
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return records
