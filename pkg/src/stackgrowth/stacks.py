"""Rotor-stack sources.

Three stack models drive the growth engine:

* :class:`PeriodicStack` -- the deterministic rotor-router stacks, a fixed
  cyclic sequence of the four directions at every site.
* :class:`IdlaStack` -- i.i.d. uniformly random directions, realized lazily
  from a keyed counter-mode PRF so that any stack element can be re-queried
  and every run is reproducible from (key, run index) alone.
* :class:`LowDiscrepancyStack` -- independent uniform permutations of the
  four directions in aligned blocks of four.

All models answer the same queries: the k-th stack element ``rotor(site, k)``
(retrospective convention: the k-th firing of a site travels along element k,
element 0 is the initial top), prefix occurrence counts
``rotor_count(site, d, n)`` over elements 1..n, and vectorized range counts
used by the bulk firing machinery.  Aggregate counts always agree with
element-wise queries, under arbitrary re-query order.

The PRF is Speck-128/256 in counter mode: a 256-bit-key cryptographic
permutation of 128-bit blocks, chosen over an AES backend because its
add-rotate-xor rounds vectorize in numpy and inline into the jitted firing
kernels, while remaining far stronger than the library generators whose
bias is known to distort cluster statistics.
"""

import hashlib
import itertools

import numpy as np
from numba import njit
from scipy.special import gammaln

from .lattice import DIR_NAMES, parse_direction

MAX_RUN = 1 << 30       # run index a: 0 < a < 2^30
MAX_K = 1 << 34         # stack index field width in the PRF block
_SPLIT_K0 = MAX_K - 8   # reserved per-site counter slots for binomial draws

_U64 = np.uint64
_MASK32 = _U64(0xFFFFFFFF)
SPECK_ROUNDS = 34


def _speck_round_keys(key):
    """Key schedule for Speck-128/256: four 64-bit words (big-endian from
    the 32-byte key) expanded to 34 round keys."""
    if len(key) != 32:
        raise ValueError("experiment key must be 32 bytes (64 hex chars)")
    words = [int.from_bytes(key[8 * i:8 * (i + 1)], "big") for i in range(4)]
    k = words[0]
    ls = [words[1], words[2], words[3]]
    mask = (1 << 64) - 1
    rks = [k]
    for i in range(SPECK_ROUNDS - 1):
        l = ls[i]
        l = ((((l >> 8) | (l << 56)) & mask) + k) & mask
        l ^= i
        k = (((k << 3) | (k >> 61)) & mask) ^ l
        ls.append(l)
        rks.append(k)
    return np.array(rks, dtype=np.uint64)


def _speck_hi(hi, lo, rks):
    """Vectorized Speck-128 encryption; returns the high output word."""
    x = np.atleast_1d(hi).astype(_U64)
    y = np.atleast_1d(lo).astype(_U64)
    c8, c56, c3, c61 = _U64(8), _U64(56), _U64(3), _U64(61)
    for i in range(SPECK_ROUNDS):
        x = ((x >> c8) | (x << c56)) + y
        x ^= rks[i]
        y = ((y << c3) | (y >> c61)) ^ x
    return x.reshape(np.shape(hi))


@njit(cache=True, inline="always")
def _speck_hi_scalar(hi, lo, rks):  # pragma: no cover
    x = np.uint64(hi)
    y = np.uint64(lo)
    for i in range(SPECK_ROUNDS):
        x = ((x >> np.uint64(8)) | (x << np.uint64(56))) + y
        x ^= rks[i]
        y = ((y << np.uint64(3)) | (y >> np.uint64(61))) ^ x
    return x


@njit(cache=True, inline="always")
def _prf_word(x, y, k, run, rks):  # pragma: no cover
    """Scalar counter-PRF word, bit-identical to the vectorized path."""
    hi = (np.uint64(x & 0xFFFFFFFF) << np.uint64(32)) | np.uint64(y & 0xFFFFFFFF)
    lo = (np.uint64(k) << np.uint64(30)) | np.uint64(run)
    return _speck_hi_scalar(hi, lo, rks)


@njit(cache=True, inline="always")
def _mulhi_scalar(v, m):  # pragma: no cover
    """floor(v*m / 2**64) for uint64 v and m < 2**32, overflow-free."""
    a1 = v >> np.uint64(32)
    a0 = v & np.uint64(0xFFFFFFFF)
    m64 = np.uint64(m)
    return (a1 * m64 + ((a0 * m64) >> np.uint64(32))) >> np.uint64(32)


def _mulhi64(v, m):
    """Vectorized floor(v*m / 2**64), exact for m < 2**32: picks a uniform
    integer in [0, m) from a PRF word with no float rounding at interval
    boundaries."""
    a1 = v >> _U64(32)
    a0 = v & _MASK32
    m = m.astype(_U64) if isinstance(m, np.ndarray) else _U64(m)
    return (a1 * m + ((a0 * m) >> _U64(32))) >> _U64(32)


class CounterPrf:
    """Keyed PRF over packed (x, y, k, run) counter blocks.

    The 128-bit input block is x (32 bits) | y (32 bits) | k (34 bits) |
    run (30 bits); coordinates are packed as two's complement.  The top 64
    bits of the cipher image serve as the leading bits of a binary fraction
    in [0, 1).  Distinct (x, y, k, run) tuples give distinct blocks, so all
    streams are independent and re-queryable in any order.
    """

    def __init__(self, key):
        self.key = bytes(key)
        self.round_keys = _speck_round_keys(self.key)

    def raw64(self, xs, ys, ks, run):
        """Top 64 bits of the PRF image, as a uint64 array."""
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size and (ks.min() < 0 or ks.max() >= MAX_K):
            raise ValueError("stack index out of the 34-bit counter range")
        if not (0 < run < MAX_RUN):
            raise ValueError("run index out of range")
        hi = (xs.astype(np.uint32).astype(_U64) << _U64(32)) \
            | ys.astype(np.uint32).astype(_U64)
        lo = (ks.astype(_U64) << _U64(30)) | _U64(run)
        return _speck_hi(hi, lo, self.round_keys)

    def raw64_scalar(self, x, y, k, run):
        """Single-block fast path; bit-identical to :meth:`raw64`."""
        return int(_prf_word(int(x), int(y), int(k), int(run),
                             self.round_keys))

    def uniform(self, xs, ys, ks, run):
        """PRF image as float64 fractions in [0, 1)."""
        return self.raw64(xs, ys, ks, run).astype(np.float64) / 2.0 ** 64


def prf_uniform(key, site, k, run):
    """Deterministic uniform in [0,1) attached to (site, stack index, run)."""
    return float(CounterPrf(key).uniform(site[0], site[1], k, run))


def quartile_direction(u):
    """Map a uniform in [0,1) to a direction: N on [0,1/4), E on [1/4,1/2),
    S on [1/2,3/4), W on [3/4,1)."""
    return min(3, int(4.0 * u))


def binomial_icdf(u, n, p):
    """Inverse-CDF binomial draws B ~ Bin(n, p) from uniforms ``u``.

    Enumerates outcomes from the mode outward (mode, mode-1, mode+1, ...),
    accumulating exact pmf values by the standard ratio recurrence, and
    returns the outcome whose cumulative interval contains u.  The interval
    lengths are exactly the binomial pmf, so the draw is exactly
    Binomial(n, p); enumeration from the mode keeps the summation short and
    numerically safe for any n.
    """
    orig_shape = np.asarray(n).shape
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if u.shape != n.shape:
        raise ValueError("u and n must have matching shapes")
    res = np.zeros(n.shape, dtype=np.int64)
    todo = n > 0
    if not todo.any():
        return res.reshape(orig_shape)
    idx = np.nonzero(todo)[0]
    uu = u[idx]
    nn = n[idx].astype(np.float64)
    q = 1.0 - p
    mode = np.floor((nn + 1.0) * p)
    np.clip(mode, 0.0, nn, out=mode)
    logpmf = (gammaln(nn + 1.0) - gammaln(mode + 1.0) - gammaln(nn - mode + 1.0)
              + mode * np.log(p) + (nn - mode) * np.log(q))
    pm = np.exp(logpmf)
    acc = pm.copy()
    lo = mode.copy()
    hi = mode.copy()
    plo = pm.copy()
    phi = pm.copy()
    done = uu < acc
    res[idx[done]] = mode[done].astype(np.int64)
    keep = ~done
    idx, uu, nn, acc = idx[keep], uu[keep], nn[keep], acc[keep]
    lo, hi, plo, phi = lo[keep], hi[keep], plo[keep], phi[keep]
    ratio = p / q
    while idx.size:
        can = lo > 0.0
        plo = np.where(can, plo * lo / ((nn - lo + 1.0) * ratio), 0.0)
        lo = np.where(can, lo - 1.0, lo)
        acc = acc + plo
        done = uu < acc
        if done.any():
            res[idx[done]] = lo[done].astype(np.int64)
        keep = ~done
        idx, uu, nn, acc = idx[keep], uu[keep], nn[keep], acc[keep]
        lo, hi, plo, phi = lo[keep], hi[keep], plo[keep], phi[keep]
        if not idx.size:
            break
        can = hi < nn
        phi = np.where(can, phi * (nn - hi) * ratio / (hi + 1.0), 0.0)
        hi = np.where(can, hi + 1.0, hi)
        acc = acc + phi
        done = uu < acc
        exhausted = (lo <= 0.0) & (hi >= nn)
        done |= exhausted  # float round-off guard; assign the top outcome
        if done.any():
            res[idx[done]] = hi[done].astype(np.int64)
        keep = ~done
        idx, uu, nn, acc = idx[keep], uu[keep], nn[keep], acc[keep]
        lo, hi, plo, phi = lo[keep], hi[keep], plo[keep], phi[keep]
    return res.reshape(orig_shape)


class PeriodicStack:
    """Cyclic rotor stacks: element k is ``seq[k mod 4]``.

    ``seq`` is the retrospective sequence (rho_0, rho_1, rho_2, rho_3):
    rho_0 is the initial stack top and the k-th firing travels along rho_k.
    For WNES the first firing of a site therefore sends a chip north.
    """

    kind = "rotor"

    def __init__(self, seq="WNES"):
        seq = seq.upper()
        if len(seq) != 4 or sorted(seq) != sorted(DIR_NAMES):
            raise ValueError(f"sequence must be a permutation of NESW, got {seq!r}")
        self.seq = seq
        self.codes = np.array([parse_direction(c) for c in seq], dtype=np.int64)
        # least positive j with rho_j = d; element 0 recurs at index 4
        self._j = np.zeros(4, dtype=np.int64)
        for pos, code in enumerate(self.codes):
            self._j[code] = pos if pos >= 1 else 4

    def describe(self):
        return {"model": self.kind, "seq": self.seq}

    def rotor(self, site, k):
        return int(self.codes[k % 4])

    def rotor_count(self, site, d, n):
        """Occurrences of direction d among elements 1..n: floor((n+4-j)/4)."""
        return (n + 4 - int(self._j[d])) // 4

    def range_counts(self, xs, ys, lo, hi):
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        out = np.empty((lo.size, 4), dtype=np.int64)
        for d in range(4):
            j = self._j[d]
            out[:, d] = (hi + 4 - j) // 4 - (lo + 4 - j) // 4
        return out

    def tops(self, xs, ys, u):
        return self.codes[np.asarray(u, dtype=np.int64) % 4].astype(np.uint8)

    def top_single(self, x, y, u):
        return int(self.codes[u % 4])


_PERMS = np.array(list(itertools.permutations(range(4))), dtype=np.uint8)  # (24, 4)
_PREFIX = np.zeros((24, 5, 4), dtype=np.int64)
for _i in range(24):
    for _t in range(1, 5):
        for _d in range(4):
            _PREFIX[_i, _t, _d] = np.count_nonzero(_PERMS[_i, :_t] == _d)


class _KeyedModel:
    """Common state for the PRF-driven models."""

    def __init__(self, key, run):
        if isinstance(key, str):
            key = bytes.fromhex(key)
        self.key = bytes(key)
        self.run = int(run)
        self.prf = CounterPrf(self.key)
        if not (0 < self.run < MAX_RUN):
            raise ValueError("run index must satisfy 0 < a < 2^30")

    @property
    def key_id(self):
        return hashlib.sha256(self.key).hexdigest()[:8]


_LDS_TOP_SLOT = 1 << 33  # reserved counter slot realizing element 0


class LowDiscrepancyStack(_KeyedModel):
    """Stacks built from independent uniform permutations of NESW.

    Blocks align with the counting origin: elements 4j+1 .. 4j+4 are the
    entries of block j's permutation, selected by the PRF word at counter
    slot j.  Any prefix 1..n then covers whole blocks plus at most one
    partial one, so prefix counts of two directions never differ by more
    than one.  Element 0 (the initial top, which no prefix count includes)
    is an independent uniform direction from a reserved slot.
    """

    kind = "lds"

    def describe(self):
        return {"model": self.kind, "key": self.key.hex(), "run": self.run}

    def _perm_idx(self, xs, ys, blocks):
        return _mulhi64(self.prf.raw64(xs, ys, blocks, self.run), 24).astype(np.int64)

    def rotor(self, site, k):
        if k <= 0:
            v = self.prf.raw64_scalar(site[0], site[1], _LDS_TOP_SLOT, self.run)
            return v >> 62
        pi = self._perm_idx(np.int64(site[0]), np.int64(site[1]),
                            np.int64((k - 1) // 4))
        return int(_PERMS[int(pi), (k - 1) % 4])

    def _cum_counts(self, xs, ys, n):
        """Counts of each direction among elements 1..n, (m,4)."""
        n = np.asarray(n, dtype=np.int64)
        pi = self._perm_idx(xs, ys, n >> 2)
        out = _PREFIX[pi, n & 3, :].copy()
        out += (n >> 2)[:, None]
        return out

    def rotor_count(self, site, d, n):
        if n <= 0:
            return 0
        x = np.asarray([site[0]], dtype=np.int64)
        y = np.asarray([site[1]], dtype=np.int64)
        cum = self._cum_counts(x, y, np.asarray([n], dtype=np.int64))
        return int(cum[0, d])

    def range_counts(self, xs, ys, lo, hi):
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        return self._cum_counts(xs, ys, hi) - self._cum_counts(xs, ys, lo)

    def tops(self, xs, ys, u):
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        u = np.asarray(u, dtype=np.int64)
        out = np.empty(u.shape, dtype=np.uint8)
        zero = u <= 0
        if zero.any():
            slots = np.full(int(zero.sum()), _LDS_TOP_SLOT, dtype=np.int64)
            v = self.prf.raw64(xs[zero], ys[zero], slots, self.run)
            out[zero] = (v >> _U64(62)).astype(np.uint8)
        pos = ~zero
        if pos.any():
            pi = self._perm_idx(xs[pos], ys[pos], (u[pos] - 1) >> 2)
            out[pos] = _PERMS[pi, (u[pos] - 1) & 3]
        return out

    def top_single(self, x, y, u):
        if u <= 0:
            return self.prf.raw64_scalar(x, y, _LDS_TOP_SLOT, self.run) >> 62
        v = self.prf.raw64_scalar(x, y, (u - 1) >> 2, self.run)
        pi = (v * 24) >> 64
        return int(_PERMS[pi, (u - 1) & 3])


class IdlaStack(_KeyedModel):
    """I.i.d. uniform rotor stacks realized lazily from the counter PRF.

    Above the per-site frontier index f(x), element k is the quartile map of
    the PRF word at slot k: N, E, S, W on the four quarters of [0,1).  The
    frontier aggregates the first f(x) elements into four counts drawn once
    as a nested binomial split (counter slots near 2^34 are reserved for
    those draws).  Elements at or below the frontier are recovered on
    demand, in strictly decreasing index order, by drawing from the urn of
    remaining counts; draws land in a flat cache pool so every element has
    one fixed value however often it is re-queried.

    f(x) = max(0, n - ceil(lam*sqrt(n))) for a primed approximation value n:
    lam = 0 aggregates everything (fast, more cache), larger lam trades time
    for memory.  A model instance is owned by one run; two instances primed
    with the same key, run and approximation realize identical stacks.
    """

    kind = "idla"

    def __init__(self, key, run, lam=0.0):
        super().__init__(key, run)
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.lam = float(lam)
        self.aux_w = None    # half-width of the frontier state box
        self.fz = None       # frontier index per aux cell
        self.kc = None       # lowest index whose urn counts are current
        self.split = None    # (4, area) counts of each direction at the frontier
        self.r4 = None       # (4, area) counts of each direction at kc
        self.woff = None     # cache window offset into the pool (-1 = none)
        self.wcap = None     # cache window capacity
        self.pool = np.zeros(0, dtype=np.uint8)
        self.pool_end = 0

    def describe(self):
        return {"model": self.kind, "key": self.key.hex(), "run": self.run,
                "lam": self.lam}

    @property
    def primed(self):
        return self.aux_w is not None

    # -- frontier state ------------------------------------------------------

    def _aux_side(self):
        return 2 * self.aux_w + 1

    def _aux_index(self, xs, ys):
        """Aux cell index for coordinate arrays; -1 outside the box."""
        if self.aux_w is None:
            return np.full(np.asarray(xs).shape, -1, dtype=np.int64)
        w = self.aux_w
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        inside = (np.abs(xs) <= w) & (np.abs(ys) <= w)
        out = np.where(inside, (xs + w) * self._aux_side() + (ys + w), -1)
        return out

    def _alloc(self, half_width):
        half_width = int(half_width)
        if self.aux_w is not None and half_width <= self.aux_w:
            return
        old = None
        if self.aux_w is not None:
            old = (self.aux_w, self.fz, self.kc, self.split, self.r4,
                   self.woff, self.wcap)
            half_width = max(half_width, 2 * self.aux_w)
        area = (2 * half_width + 1) ** 2
        self.fz = np.zeros(area, dtype=np.int64)
        self.kc = np.zeros(area, dtype=np.int64)
        self.split = np.zeros((4, area), dtype=np.int64)
        self.r4 = np.zeros((4, area), dtype=np.int64)
        self.woff = np.full(area, -1, dtype=np.int64)
        self.wcap = np.zeros(area, dtype=np.int64)
        if old is not None:
            ow, ofz, okc, osplit, or4, owoff, owcap = old
            os_, ns = 2 * ow + 1, 2 * half_width + 1
            sel = np.arange(os_ * os_, dtype=np.int64)
            nx = sel // os_ - ow + half_width
            ny = sel % os_ - ow + half_width
            dst = nx * ns + ny
            self.fz[dst] = ofz
            self.kc[dst] = okc
            self.split[:, dst] = osplit
            self.r4[:, dst] = or4
            self.woff[dst] = owoff
            self.wcap[dst] = owcap
        self.aux_w = half_width
        if self.pool.size == 0:
            self.pool = np.zeros(1 << 14, dtype=np.uint8)

    def _grow_pool(self, need):
        cap = self.pool.size
        while cap < self.pool_end + need:
            cap *= 2
        if cap != self.pool.size:
            grown = np.zeros(cap, dtype=np.uint8)
            grown[:self.pool_end] = self.pool[:self.pool_end]
            self.pool = grown

    def _reserve(self, cells, depths):
        """Give each aux cell a cache window of at least ``depths`` bytes,
        relocating existing draws when a window grows."""
        for a, need in zip(cells.tolist(), depths.tolist()):
            if self.wcap[a] >= need:
                continue
            cap = max(16, 1 << int(need - 1).bit_length())
            self._grow_pool(cap)
            off = self.pool_end
            used = self.fz[a] - self.kc[a]
            if used > 0:
                src = self.woff[a]
                self.pool[off:off + used] = self.pool[src:src + used]
            self.woff[a] = off
            self.wcap[a] = cap
            self.pool_end += cap

    def frontier(self, site):
        a = self._aux_index(np.asarray([site[0]]), np.asarray([site[1]]))[0]
        return 0 if a < 0 else int(self.fz[a])

    def frontier_counts(self, site):
        a = self._aux_index(np.asarray([site[0]]), np.asarray([site[1]]))[0]
        if a < 0:
            return (0, 0, 0, 0)
        return tuple(int(self.split[d, a]) for d in range(4))

    def urn_counts(self, site):
        """Remaining counts R(., kc) of the not-yet-drawn urn at ``site``."""
        a = self._aux_index(np.asarray([site[0]]), np.asarray([site[1]]))[0]
        if a < 0:
            return (0, 0, 0, 0)
        return tuple(int(self.r4[d, a]) for d in range(4))

    def _split_draw(self, xs, ys, f):
        """Nested binomial split of f elements into direction counts (m,4)."""
        slots = [np.full(xs.shape, _SPLIT_K0 + j, dtype=np.int64) for j in range(3)]
        u0 = self.prf.uniform(xs, ys, slots[0], self.run)
        u1 = self.prf.uniform(xs, ys, slots[1], self.run)
        u2 = self.prf.uniform(xs, ys, slots[2], self.run)
        b0 = binomial_icdf(u0, f, 0.25)
        b1 = binomial_icdf(u1, f - b0, 1.0 / 3.0)
        b2 = binomial_icdf(u2, f - b0 - b1, 0.5)
        return np.stack([b0, b1, b2, f - b0 - b1 - b2], axis=-1)

    def init_frontier(self, site, approx_value):
        """Prime one site: fix f(x) from the approximation value and draw the
        four frontier counts.  Idempotent for a given (key, run)."""
        if approx_value < 0:
            raise ValueError("approximation value must be nonnegative")
        x, y = site
        f = max(0, int(approx_value) - int(np.ceil(self.lam * np.sqrt(approx_value))))
        self._alloc(max(8, abs(x), abs(y)))
        a = int(self._aux_index(np.asarray([x]), np.asarray([y]))[0])
        self.fz[a] = f
        self.kc[a] = f
        if f > 0:
            counts = self._split_draw(np.asarray([x]), np.asarray([y]),
                                      np.asarray([f], dtype=np.int64))[0]
            for d in range(4):
                self.split[d, a] = counts[d]
                self.r4[d, a] = counts[d]
        return f

    def prime(self, approx):
        """Prime every site in the support of an approximation Field at once."""
        xs, ys, vals = approx.support()
        self._alloc(approx.half_width)
        f = vals.astype(np.int64)
        if self.lam > 0:
            f = np.maximum(0, f - np.ceil(self.lam * np.sqrt(f)).astype(np.int64))
        if f.size and f.max() >= _SPLIT_K0:
            raise ValueError("approximation too large for the counter layout")
        cells = self._aux_index(xs, ys)
        self.fz[cells] = f
        self.kc[cells] = f
        pos = f > 0
        if pos.any():
            counts = self._split_draw(xs[pos], ys[pos], f[pos])
            for d in range(4):
                self.split[d, cells[pos]] = counts[:, d]
                self.r4[d, cells[pos]] = counts[:, d]

    def kernel_state(self):
        """Array bundle shared with the jitted firing kernels."""
        if not self.primed:
            self._alloc(8)
        return (self.aux_w, self.fz, self.kc, self.r4, self.woff, self.wcap)

    # -- urn draws below the frontier ----------------------------------------

    def draw_below_frontier(self, site, k):
        """Draw element k (1 <= k <= f) from the urn of remaining counts.

        Elements must be consumed in strictly decreasing index order; the
        next legal draw is always at the current count index.
        """
        a = int(self._aux_index(np.asarray([site[0]]), np.asarray([site[1]]))[0])
        kcur = 0 if a < 0 else int(self.kc[a])
        assert k == kcur >= 1, "below-frontier draws must proceed in decreasing index order"
        self._ensure_drawn(np.asarray([site[0]]), np.asarray([site[1]]),
                           np.asarray([k - 1], dtype=np.int64))
        return int(self.pool[self.woff[a] + self.fz[a] - k])

    def _ensure_drawn(self, xs, ys, lo):
        """Draw urn elements lazily so that kc <= lo at each given site.

        Sites must be distinct.  Elements are drawn in decreasing index
        order; each draw picks a uniform ball from the remaining counts via
        the PRF word at that index, then removes it.
        """
        cells = self._aux_index(xs, ys)
        kcur = self.kc[cells]
        act = kcur > lo
        if not act.any():
            return
        ax, ay, alo = xs[act], ys[act], lo[act]
        ac = cells[act]
        self._reserve(ac, self.fz[ac] - alo)
        k = kcur[act]
        r4 = self.r4
        pool = self.pool
        base = self.woff[ac] + self.fz[ac]
        while ax.size:
            v = self.prf.raw64(ax, ay, k, self.run)
            ball = _mulhi64(v, k)
            c0 = r4[0, ac].astype(_U64)
            c1 = c0 + r4[1, ac].astype(_U64)
            c2 = c1 + r4[2, ac].astype(_U64)
            e = ((ball >= c0).astype(np.int64) + (ball >= c1) + (ball >= c2))
            r4[e, ac] -= 1
            pool[base - k] = e.astype(np.uint8)
            k -= 1
            done = k <= alo
            if done.any():
                self.kc[ac[done]] = k[done]
                keep = ~done
                ax, ay, alo, k = ax[keep], ay[keep], alo[keep], k[keep]
                ac, base = ac[keep], base[keep]
        # sites that finished mid-loop already stored their kc above

    def _slice_counts(self, cells, d0, d1, segs, out, sign):
        """Accumulate direction counts of cached draws at depths [d0, d1)."""
        lens = d1 - d0
        m = lens > 0
        if not m.any():
            return
        cells, d0, lens, segs = cells[m], d0[m], lens[m], segs[m]
        starts = self.woff[cells] + d0
        total = int(lens.sum())
        pos_break = np.concatenate([[0], np.cumsum(lens)[:-1]])
        flat = np.arange(total, dtype=np.int64)
        owner = np.searchsorted(pos_break, flat, side="right") - 1
        src = starts[owner] + (flat - pos_break[owner])
        codes = self.pool[src].astype(np.int64)
        np.add.at(out, (segs[owner], codes), sign)

    # -- queries ---------------------------------------------------------------

    def _frontiers(self, cells):
        f = np.zeros(cells.shape, dtype=np.int64)
        inside = cells >= 0
        f[inside] = self.fz[cells[inside]] if self.aux_w is not None else 0
        return f

    def _quartile_counts(self, xs, ys, lo, hi, segs, out, chunk=1 << 22):
        sizes = hi - lo
        m = sizes > 0
        if not m.any():
            return
        xs, ys, lo, sizes, segs = xs[m], ys[m], lo[m], sizes[m], segs[m]
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        total = int(sizes.sum())
        pos = 0
        while pos < total:
            n = min(chunk, total - pos)
            flat = np.arange(pos, pos + n, dtype=np.int64)
            owner = np.searchsorted(starts, flat, side="right") - 1
            ks = lo[owner] + (flat - starts[owner]) + 1
            v = self.prf.raw64(xs[owner], ys[owner], ks, self.run)
            e = (v >> _U64(62)).astype(np.int64)
            np.add.at(out, (segs[owner], e), 1)
            pos += n

    def range_counts(self, xs, ys, lo, hi):
        """Counts of each direction among elements (lo, hi], per site, (m,4)."""
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        out = np.zeros((xs.size, 4), dtype=np.int64)
        segs = np.arange(xs.size, dtype=np.int64)
        cells = self._aux_index(xs, ys)
        f = self._frontiers(cells)
        bl = np.minimum(hi, f)
        below = lo < bl
        if below.any():
            bx, by, bc = xs[below], ys[below], cells[below]
            bl_, blo = bl[below], lo[below]
            bf, bseg = f[below], segs[below]
            whole = (blo == 0) & (bl_ == bf)
            if whole.any():
                for d in range(4):
                    out[bseg[whole], d] += self.split[d, bc[whole]]
            rest = ~whole
            if rest.any():
                rx, ry, rc = bx[rest], by[rest], bc[rest]
                rlo, rbl = blo[rest], bl_[rest]
                rf, rseg = bf[rest], bseg[rest]
                zero = rlo == 0
                # counts(0, b] = split - draws above b; otherwise slice directly
                tgt = np.where(zero, rbl, rlo)
                self._ensure_drawn(rx, ry, tgt)
                if zero.any():
                    for d in range(4):
                        out[rseg[zero], d] += self.split[d, rc[zero]]
                    self._slice_counts(rc[zero],
                                       np.zeros(int(zero.sum()), dtype=np.int64),
                                       rf[zero] - rbl[zero],
                                       rseg[zero], out, -1)
                pos = ~zero
                if pos.any():
                    self._slice_counts(rc[pos], rf[pos] - rbl[pos],
                                       rf[pos] - rlo[pos], rseg[pos], out, 1)
        al = np.maximum(lo, f)
        self._quartile_counts(xs, ys, al, hi, segs, out)
        return out

    def rotor_count(self, site, d, n):
        if n <= 0:
            return 0
        c = self.range_counts(np.asarray([site[0]]), np.asarray([site[1]]),
                              np.asarray([0], dtype=np.int64),
                              np.asarray([n], dtype=np.int64))
        return int(c[0, d])

    def rotor(self, site, k):
        """Element k of the stack at ``site``.

        Element 0 never enters any prefix count; it is realized directly from
        the PRF word at slot 0, as are all elements above the frontier.
        """
        f = self.frontier(site)
        if 1 <= k <= f:
            a = int(self._aux_index(np.asarray([site[0]]),
                                    np.asarray([site[1]]))[0])
            if self.kc[a] >= k:
                self._ensure_drawn(np.asarray([site[0]]), np.asarray([site[1]]),
                                   np.asarray([k - 1], dtype=np.int64))
            return int(self.pool[self.woff[a] + self.fz[a] - k])
        return self.prf.raw64_scalar(site[0], site[1], k, self.run) >> 62

    def tops(self, xs, ys, u):
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        u = np.asarray(u, dtype=np.int64)
        out = np.empty(xs.shape, dtype=np.uint8)
        cells = self._aux_index(xs, ys)
        f = self._frontiers(cells)
        below = (u >= 1) & (u <= f)
        if below.any():
            bx, by, bu = xs[below], ys[below], u[below]
            bc = cells[below]
            self._ensure_drawn(bx, by, bu - 1)
            out[below] = self.pool[self.woff[bc] + self.fz[bc] - bu]
        above = ~below
        if above.any():
            v = self.prf.raw64(xs[above], ys[above], u[above], self.run)
            out[above] = (v >> _U64(62)).astype(np.uint8)
        return out

    def top_single(self, x, y, u):
        f = self.frontier((x, y))
        if 1 <= u <= f:
            a = int(self._aux_index(np.asarray([x]), np.asarray([y]))[0])
            if self.kc[a] >= u:
                self._ensure_drawn(np.asarray([x]), np.asarray([y]),
                                   np.asarray([u - 1], dtype=np.int64))
            return int(self.pool[self.woff[a] + self.fz[a] - u])
        return self.prf.raw64_scalar(x, y, u, self.run) >> 62


def make_model(name, seq="WNES", key=None, run=1, lam=0.0):
    """Build a stack model by name: 'rotor', 'idla' or 'lds'."""
    if name == "rotor":
        return PeriodicStack(seq)
    if key is None:
        raise ValueError("random models need an experiment key")
    if name == "idla":
        return IdlaStack(key, run, lam)
    if name == "lds":
        return LowDiscrepancyStack(key, run)
    raise ValueError(f"unknown model {name!r}")
