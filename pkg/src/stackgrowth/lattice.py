"""Square-lattice geometry: sites, the four cardinal directions, and growable
origin-centered integer fields.

Sites are plain ``(x, y)`` tuples of Python ints; bulk code works on numpy
coordinate arrays instead.  Directions are small ints (N=0, E=1, S=2, W=3),
ordered so that the quartile map used by the random stack models is just the
direction code itself.
"""

import numpy as np

N, E, S, W = 0, 1, 2, 3
DIR_NAMES = "NESW"
DIR_CODE = {c: i for i, c in enumerate(DIR_NAMES)}

# unit offsets, indexed by direction code
DX = np.array([0, 1, 0, -1], dtype=np.int64)
DY = np.array([1, 0, -1, 0], dtype=np.int64)
OFFSETS = ((0, 1), (1, 0), (0, -1), (-1, 0))


def opposite(d):
    """Reverse direction: N<->S, E<->W."""
    return (d + 2) & 3


def neighbor(site, d):
    """Site reached by one step in direction ``d``."""
    x, y = site
    return (x + int(DX[d]), y + int(DY[d]))


def norm2(site):
    """Exact squared Euclidean norm x^2 + y^2 (Python ints, never overflows)."""
    x, y = site
    return x * x + y * y


def norm(site):
    """Euclidean norm, computed in floating point from the exact integer norm2."""
    return float(np.sqrt(norm2(site)))


def parse_direction(c):
    c = c.upper()
    if c not in DIR_CODE:
        raise ValueError(f"unknown direction {c!r}, expected one of NESW")
    return DIR_CODE[c]


class Field:
    """Dense integer field on Z^2, centered at the origin, default 0 outside.

    Stores a (2W+1) x (2W+1) array for half-width W; entry (x, y) lives at
    ``data[x+W, y+W]``.  Reads outside the stored box return 0; writes outside
    grow the box geometrically.  Bulk code may address ``data`` directly but
    must call :meth:`ensure_radius` first.
    """

    __slots__ = ("half_width", "data", "dtype")

    def __init__(self, half_width=8, dtype=np.int64):
        self.half_width = int(half_width)
        self.dtype = np.dtype(dtype)
        side = 2 * self.half_width + 1
        self.data = np.zeros((side, side), dtype=self.dtype)

    @property
    def side(self):
        return 2 * self.half_width + 1

    def copy(self):
        f = Field.__new__(Field)
        f.half_width = self.half_width
        f.dtype = self.dtype
        f.data = self.data.copy()
        return f

    def ensure_radius(self, radius):
        """Grow the box (geometrically) so that |x|,|y| <= radius fits."""
        radius = int(radius)
        if radius <= self.half_width:
            return
        new_w = max(radius, 2 * self.half_width)
        side = 2 * new_w + 1
        grown = np.zeros((side, side), dtype=self.dtype)
        off = new_w - self.half_width
        grown[off:off + self.data.shape[0], off:off + self.data.shape[1]] = self.data
        self.data = grown
        self.half_width = new_w

    def get(self, x, y):
        w = self.half_width
        if -w <= x <= w and -w <= y <= w:
            return int(self.data[x + w, y + w])
        return 0

    def set(self, x, y, value):
        self.ensure_radius(max(abs(x), abs(y)))
        self.data[x + self.half_width, y + self.half_width] = value

    def add(self, x, y, value):
        self.ensure_radius(max(abs(x), abs(y)))
        self.data[x + self.half_width, y + self.half_width] += value

    def __getitem__(self, site):
        return self.get(site[0], site[1])

    def __setitem__(self, site, value):
        self.set(site[0], site[1], value)

    def values(self, xs, ys):
        """Bulk read at coordinate arrays; out-of-box coordinates read 0."""
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        w = self.half_width
        inside = (np.abs(xs) <= w) & (np.abs(ys) <= w)
        out = np.zeros(xs.shape, dtype=self.dtype)
        out[inside] = self.data[xs[inside] + w, ys[inside] + w]
        return out

    def support(self):
        """Coordinates and values of all nonzero entries, as arrays (xs, ys, vals)."""
        ix, iy = np.nonzero(self.data)
        return ix - self.half_width, iy - self.half_width, self.data[ix, iy]

    @classmethod
    def from_support(cls, xs, ys, vals, dtype=np.int64):
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        w = 8 if xs.size == 0 else max(8, int(max(np.abs(xs).max(), np.abs(ys).max())))
        f = cls(half_width=w, dtype=dtype)
        f.data[xs + w, ys + w] = vals
        return f

    def total(self):
        return int(self.data.sum())

    def equals(self, other):
        """Value equality as functions on Z^2 (box sizes may differ)."""
        w = min(self.half_width, other.half_width)
        a, b = self, other
        ca = a.data[a.half_width - w:a.half_width + w + 1,
                    a.half_width - w:a.half_width + w + 1]
        cb = b.data[b.half_width - w:b.half_width + w + 1,
                    b.half_width - w:b.half_width + w + 1]
        if not np.array_equal(ca, cb):
            return False
        # anything outside the common box must be zero
        for f in (a, b):
            if f.half_width > w:
                m = np.zeros_like(f.data, dtype=bool)
                off = f.half_width - w
                m[off:off + 2 * w + 1, off:off + 2 * w + 1] = True
                if np.any(f.data[~m]):
                    return False
        return True
