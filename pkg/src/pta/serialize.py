"""Single-file container: JSON header followed by a flat little-endian float blob.

Layout on disk::

    b"PTA1" | uint64 LE header length | header JSON (utf-8) | blob

The header lists every array as ``{"name", "offset", "shape"}`` with offsets
counted in elements of ``header["dtype"]``.
"""

import json
from pathlib import Path
import struct

import numpy as np

from pta.errors import ValidationError

MAGIC = b"PTA1"


def write_blob_file(path, header, arrays, dtype="<f8"):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=dtype)
        entries.append({"name": name, "offset": offset, "shape": list(a.shape)})
        chunks.append(a.tobytes())
        offset += a.size
    head = dict(header, dtype=np.dtype(dtype).str, arrays=entries)
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)


def read_blob_file(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValidationError(f"{path}: not a PTA blob file")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + n].decode("utf-8"))
    blob = np.frombuffer(data[12 + n :], dtype=header["dtype"])
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"]))
        arrays[e["name"]] = blob[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def write_flat_f32(path, arrays):
    """Dump named arrays as raw ``<f4`` plus a ``.json`` sidecar with shapes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = []
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(a.tobytes())
            shapes.append({"key": name, "shape": list(a.shape)})
    path.with_suffix(".json").write_text(json.dumps({"dtype": "float32", "byteorder": "little", "blocks": shapes}, indent=1))
