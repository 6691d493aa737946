"""Potential kernel of simple random walk on Z^2 and the odometer seed.

The kernel a(z) satisfies a(0) = 0 and discrete harmonicity away from the
origin with a unit source there: (1/4) sum over neighbors of a - a = [z = 0].
Every lattice value is an exact rational combination p + q/pi; the classic
recursion that propagates values outward from the diagonal is numerically
ill-conditioned in floating point, so the table is built in exact rational
arithmetic once and converted to extended precision for evaluation.

Beyond the table the asymptotic expansion
``a(z) = (2/pi) ln|z| + kappa - Re(z^4) / (6 pi |z|^6) + O(|z|^-4)``
takes over, with kappa = (ln 8 + 2*gamma)/pi.

The odometer seed u1 combines |z|^2 with the kernel so that the growth
cluster of n chips is approximately flattened in one shot; it is evaluated
on the disk of radius r + margin, r = sqrt(n/pi), and clamped nonnegative.
"""

import csv
from dataclasses import dataclass
from fractions import Fraction

import mpmath
import numpy as np

from .lattice import Field, norm2

CROSSOVER_RADIUS = 100   # exact kernel below, asymptotic expansion beyond
TABLE_RADIUS = 112       # exact table extends past the crossover for checks

_LD = np.longdouble


def _ld(mpf_value):
    """mpmath value -> 80-bit long double via a decimal round trip."""
    return _LD(mpmath.nstr(mpf_value, 30))


mpmath.mp.dps = 45
PI_LD = _ld(mpmath.pi)
EULER_GAMMA_LD = _ld(mpmath.euler)
KAPPA_LD = _ld((mpmath.log(8) + 2 * mpmath.euler) / mpmath.pi)
KAPPA = float(KAPPA_LD)


@dataclass(frozen=True)
class PiRational:
    """Exact number of the form p + q/pi with rational p, q."""

    p: Fraction
    q: Fraction

    def __add__(self, other):
        return PiRational(self.p + other.p, self.q + other.q)

    def __sub__(self, other):
        return PiRational(self.p - other.p, self.q - other.q)

    def scale(self, c):
        c = Fraction(c)
        return PiRational(self.p * c, self.q * c)

    def _workdps(self):
        # p and q grow like 4^|z| while p + q/pi stays small: the conversion
        # must carry enough digits to survive the cancellation
        digits = max(abs(self.p.numerator).bit_length(),
                     abs(self.q.numerator).bit_length(),
                     self.p.denominator.bit_length(),
                     self.q.denominator.bit_length())
        return digits // 3 + 40

    def to_mpf(self):
        with mpmath.workdps(self._workdps()):
            return (mpmath.mpf(self.p.numerator) / self.p.denominator
                    + (mpmath.mpf(self.q.numerator) / self.q.denominator)
                    / mpmath.pi)

    def to_real(self):
        with mpmath.workdps(self._workdps()):
            return float(mpmath.mpf(self.p.numerator) / self.p.denominator
                         + (mpmath.mpf(self.q.numerator) / self.q.denominator)
                         / mpmath.pi)

    def to_longdouble(self):
        with mpmath.workdps(self._workdps()):
            val = (mpmath.mpf(self.p.numerator) / self.p.denominator
                   + (mpmath.mpf(self.q.numerator) / self.q.denominator)
                   / mpmath.pi)
            return _ld(val)


_ZERO = PiRational(Fraction(0), Fraction(0))


class KernelTable:
    """Exact kernel values on the octant 0 <= y <= x <= radius.

    Built from the exact diagonal identity a(n, n) = (4/pi) * sum_{k<=n}
    1/(2k-1), the defining harmonicity relation rearranged to solve for the
    one unknown neighbor along each new column, and reflection symmetry
    across the axes and the main diagonal.
    """

    def __init__(self, radius=TABLE_RADIUS):
        self.radius = int(radius)
        r = self.radius
        oct_ = {}
        oct_[(0, 0)] = _ZERO
        if r >= 1:
            # harmonicity at the origin with all four neighbors equal
            oct_[(1, 0)] = PiRational(Fraction(1), Fraction(0))
            oct_[(1, 1)] = PiRational(Fraction(0), Fraction(4))
        qdiag = Fraction(4)
        for n in range(2, r + 1):
            qdiag += Fraction(4, 2 * n - 1)
            oct_[(n, n)] = PiRational(Fraction(0), qdiag)
        for x in range(1, r):
            # unknown diagonal neighbor from harmonicity at (x, x)
            oct_[(x + 1, x)] = oct_[(x, x)].scale(2) - oct_[(x, x - 1)]
            for y in range(x - 1, -1, -1):
                below = oct_[(x, 1)] if y == 0 else oct_[(x, y - 1)]
                oct_[(x + 1, y)] = (oct_[(x, y)].scale(4) - oct_[(x - 1, y)]
                                    - oct_[(x, y + 1)] - below)
        self._octant = oct_

    def exact(self, x, y):
        """Exact a(x, y), folded into the stored octant by symmetry."""
        x, y = abs(int(x)), abs(int(y))
        if x < y:
            x, y = y, x
        if x > self.radius:
            raise ValueError(f"site ({x},{y}) outside the exact table")
        return self._octant[(x, y)]

    def value(self, x, y):
        return self.exact(x, y).to_real()

    def grid_longdouble(self, half_width):
        """Dense (2w+1)^2 long-double grid of a(z), origin-centered."""
        w = int(half_width)
        if w > self.radius:
            raise ValueError("requested grid exceeds the exact table")
        oct_vals = {k: v.to_longdouble() for k, v in self._octant.items()
                    if max(k) <= w}
        grid = np.zeros((2 * w + 1, 2 * w + 1), dtype=_LD)
        for (x, y), v in oct_vals.items():
            for (sx, sy) in {(x, y), (y, x)}:
                for fx in (sx, -sx):
                    for fy in (sy, -sy):
                        grid[fx + w, fy + w] = v
        return grid

    def dump_csv(self, path):
        """Octant dump, one row x,y,p_num,p_den,q_num,q_den per site."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "y", "p_num", "p_den", "q_num", "q_den"])
            for x in range(self.radius + 1):
                for y in range(min(x, self.radius) + 1):
                    v = self._octant[(x, y)]
                    wr.writerow([x, y, v.p.numerator, v.p.denominator,
                                 v.q.numerator, v.q.denominator])


_TABLE = None


def kernel_table():
    global _TABLE
    if _TABLE is None:
        _TABLE = KernelTable()
    return _TABLE


def kernel_exact(site):
    """Exact a(z) as a PiRational; only defined for |z| < CROSSOVER_RADIUS."""
    if norm2(site) >= CROSSOVER_RADIUS ** 2:
        raise ValueError("exact kernel is only tabulated for |z| < 100")
    return kernel_table().exact(site[0], site[1])


def kernel_asymptotic(site):
    """Asymptotic kernel (2/pi) ln|z| + kappa - Re(z^4)/(6 pi |z|^6).

    The quartic term uses Re(z^4)/|z|^4 = cos(4 theta) written in integer
    arithmetic; the truncation error is O(|z|^-4).
    """
    x, y = int(site[0]), int(site[1])
    n2 = x * x + y * y
    if n2 == 0:
        raise ValueError("asymptotic kernel undefined at the origin")
    n2_ld = _LD(n2)
    re_z4 = _LD(x ** 4 - 6 * x * x * y * y + y ** 4)
    val = (_LD(1) / PI_LD) * np.log(n2_ld) + KAPPA_LD \
        - re_z4 / (_LD(6) * PI_LD * n2_ld ** 3)
    return float(val)


@dataclass
class ApproxOdometer:
    """One-shot firing estimate for n chips dropped at the origin."""

    u: Field
    n: int
    r: float
    crossover: int
    margin: int


def default_margin(n):
    """Box slack beyond the ideal radius; fluctuations are logarithmic."""
    return max(32, int(np.ceil(4.0 * np.log(max(n, 1)))))


_AGRID_CACHE = {}


def _a_grid(half_width):
    if half_width not in _AGRID_CACHE:
        _AGRID_CACHE[half_width] = kernel_table().grid_longdouble(half_width)
    return _AGRID_CACHE[half_width]


def approx_odometer(n, crossover=CROSSOVER_RADIUS, margin=None):
    """Initial odometer estimate u1, supported on the disk |z| <= r.

    Inside the crossover radius u1(z) rounds |z|^2 + r^2 (2 ln r - 1 +
    pi*kappa - pi*a(z)) with the exact kernel; outside it substitutes the
    asymptotic expansion, giving |z|^2 + r^2 (2 ln(r/|z|) - 1 +
    Re(z^4)/(6 |z|^6)).  Both branches round to nearest (half up) and clamp
    at zero.  Arithmetic is 80-bit extended precision.

    The formula detaches quadratically at the free boundary and its
    analytic continuation grows like (|z|-r)^2 on both sides, so outside
    the ideal disk it no longer estimates the odometer (which vanishes
    there up to fluctuations): evaluation stops at |z| <= r and the
    estimate is zero beyond.  ``margin`` only pads the allocated box.
    """
    n = int(n)
    if n < 1:
        raise ValueError("need at least one chip")
    if margin is None:
        margin = default_margin(n)
    r2 = _LD(n) / PI_LD
    r = np.sqrt(r2)
    w = int(np.ceil(float(r))) + margin
    side = 2 * w + 1
    xs = np.arange(-w, w + 1, dtype=np.int64)
    n2 = (xs * xs)[:, None] + (xs * xs)[None, :]
    u1 = np.zeros((side, side), dtype=_LD)

    inner = n2 < crossover * crossover
    cw = min(w, crossover - 1)
    agrid = _a_grid(cw)
    const_in = r2 * (np.log(r2) - _LD(1) + PI_LD * KAPPA_LD)
    # only the centered (2cw+1)^2 window can be inner
    lo, hi = w - cw, w + cw + 1
    win = inner[lo:hi, lo:hi]
    t_in = (n2[lo:hi, lo:hi].astype(_LD)
            + const_in - (PI_LD * r2) * agrid)
    u1[lo:hi, lo:hi][win] = t_in[win]

    outer = ~inner
    if outer.any():
        xg = np.broadcast_to(xs[:, None], (side, side))[outer].astype(np.int64)
        yg = np.broadcast_to(xs[None, :], (side, side))[outer].astype(np.int64)
        m2 = n2[outer].astype(_LD)
        re_z4 = (xg ** 4 - 6 * xg * xg * yg * yg + yg ** 4).astype(_LD)
        t_out = (m2 + r2 * (np.log(r2) - np.log(m2) - _LD(1))
                 + r2 * re_z4 / (_LD(6) * m2 ** 3))
        u1[outer] = t_out

    vals = np.floor(u1 + _LD(0.5))
    np.clip(vals, 0, None, out=vals)
    # zero outside the evaluation disk |z| <= r
    vals[n2.astype(_LD) > r2] = 0
    fld = Field(w)
    fld.data[...] = vals.astype(np.int64)
    return ApproxOdometer(u=fld, n=n, r=float(r), crossover=int(crossover),
                          margin=int(margin))
