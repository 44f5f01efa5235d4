"""Columnar binary storage for posterior draws.

Layout (all integers little-endian):

    magic       4 bytes   b"XSD1"
    meta_len    u64       length of the JSON metadata block
    meta        bytes     UTF-8 JSON (axis names, labels, free-form fields)
    n_arrays    u32
    per array:
        name_len  u16, name (UTF-8)
        ndim      u8
        dims      ndim x u64
        data      prod(dims) x f64, C order

Metadata key ``axes`` maps an array name to its axis names and ``labels``
maps an axis name to its tick labels (for example country codes).
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"XSD1"


def write_draws(path, arrays, meta=None):
    meta = dict(meta or {})
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes(order="C"))


def _read(fh, n, path):
    b = fh.read(n)
    if len(b) != n:
        raise ParseError("truncated draws file", path, None)
    return b


def read_draws(path):
    """Return ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        if _read(fh, 4, path) != MAGIC:
            raise ParseError("not a draws file (bad magic bytes)", path, None)
        (meta_len,) = struct.unpack("<Q", _read(fh, 8, path))
        meta = json.loads(_read(fh, meta_len, path).decode("utf-8"))
        (n,) = struct.unpack("<I", _read(fh, 4, path))
        arrays = {}
        for _ in range(n):
            (ln,) = struct.unpack("<H", _read(fh, 2, path))
            name = _read(fh, ln, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, path))
            dims = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim, path))
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(_read(fh, 8 * count, path), dtype="<f8")
            arrays[name] = data.reshape(dims).astype(float)
        if fh.read(1):
            raise ParseError("trailing bytes after the last array", path, None)
    return arrays, meta


def export_csv(path, arrays, meta=None):
    """Long-format CSV: one row per element with axis labels."""
    meta = meta or {}
    axes = meta.get("axes", {})
    labels = meta.get("labels", {})
    width = max((a.ndim for a in arrays.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["array"] + [f"axis{i}" for i in range(width)] + ["value"])
        for name in sorted(arrays):
            a = arrays[name]
            names = axes.get(name, [f"dim{i}" for i in range(a.ndim)])
            for idx in np.ndindex(a.shape):
                ticks = []
                for ax, i in zip(names, idx):
                    lab = labels.get(ax)
                    ticks.append(f"{ax}={lab[i] if lab else i}")
                w.writerow([name] + ticks + [""] * (width - a.ndim) + [repr(float(a[idx]))])
