"""Flat checkpoint container.

Layout::

    TRCKPT 1
    meta <key> <json-value>            (zero or more)
    tensor <name> <dtype> <shape> <offset> <nbytes>   (one per array)
    end
    <raw little-endian bytes>

``shape`` is comma separated (``-`` for a 0-d array); ``offset`` counts from
the first byte after the ``end`` line. dtype is a numpy little-endian code
such as ``<f4``. Round trips are bit exact.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = "TRCKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None) -> None:
    header = [MAGIC]
    for key, val in (meta or {}).items():
        if any(c.isspace() for c in key):
            raise CheckpointError(f"meta key {key!r} contains whitespace")
        header.append(f"meta {key} {json.dumps(val, sort_keys=True)}")
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        header.append(f"tensor {name} {le.dtype.str} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    header.append("end")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (OrderedDict name -> array, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    meta: dict = {}
    pos = 0
    entries = []
    first = True
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("truncated header")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise CheckpointError(f"bad magic {line!r}")
            first = False
            continue
        if line == "end":
            break
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, val = rest.split(" ", 1)
            meta[key] = json.loads(val)
        elif kind == "tensor":
            name, dtype, shape, off, nbytes = rest.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            entries.append((name, np.dtype(dtype), dims, int(off), int(nbytes)))
        else:
            raise CheckpointError(f"unknown header line {line!r}")
    for name, dtype, dims, off, nbytes in entries:
        start = pos + off
        if start + nbytes > len(blob):
            raise CheckpointError(f"{name}: data runs past end of file")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        tensors[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return tensors, meta
