"""Cluster snapshot files: a flat binary header plus row-major arrays.

Layout: magic ``ASGC``, u32 version, i32 half-width W, then three
(2W+1) x (2W+1) row-major arrays: chips as int32, odometer as int32, top
rotors as uint8 (direction code + 1, 0 where none).  Memory-mappable and
byte-stable, so re-running a manifest reproduces the file bit for bit.
"""

import json
import struct

import numpy as np

from .lattice import Field

MAGIC = b"ASGC"
VERSION = 1


def _tight_radius(fields):
    w = 1
    for f in fields:
        ix, iy = np.nonzero(f.data)
        if ix.size:
            w = max(w, int(np.abs(ix - f.half_width).max()),
                    int(np.abs(iy - f.half_width).max()))
    return w


def _window(field, w):
    field.ensure_radius(w)
    c = field.half_width
    return field.data[c - w:c + w + 1, c - w:c + w + 1]


def save_snapshot(path, sigma, u, top):
    # crop to the tight bounding box so identical states (e.g. the fast
    # solver against step-by-step simulation) serialize byte-identically
    w = _tight_radius((sigma, u, top))
    side = 2 * w + 1
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Ii", VERSION, w))
        fh.write(_window(sigma, w).astype("<i4").tobytes())
        fh.write(_window(u, w).astype("<i4").tobytes())
        fh.write(_window(top, w).astype("u1").tobytes())
    return side


def load_snapshot(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a cluster snapshot")
        version, w = struct.unpack("<Ii", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        side = 2 * w + 1
        cells = side * side
        sig = np.frombuffer(fh.read(4 * cells), dtype="<i4").reshape(side, side)
        uu = np.frombuffer(fh.read(4 * cells), dtype="<i4").reshape(side, side)
        tp = np.frombuffer(fh.read(cells), dtype="u1").reshape(side, side)
    out = []
    for arr in (sig, uu, tp):
        f = Field(w)
        f.data[...] = arr.astype(np.int64)
        out.append(f)
    return tuple(out)


def save_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)
