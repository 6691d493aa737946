"""Cluster statistics: radius differences, complex boundary moments, and
least-squares fits of fluctuation growth."""

import math
from dataclasses import dataclass

import numpy as np

# putative center of mass by rotor sequence; firing drift leaves the
# occupied set centered slightly off the origin
SEQUENCE_CENTERS = {
    "WNES": (0.5, 0.5),
    "WENS": (0.75, 0.25),
    "WNSE": (0.25, 0.25),
}


def occupied_sites(sigma):
    """Coordinates of the occupied cluster {x : sigma(x) = 1}."""
    ix, iy = np.nonzero(sigma.data == 1)
    w = sigma.half_width
    return ix - w, iy - w


def radius_stats(xs, ys):
    """(inradius, outradius, outradius - inradius) of an occupied set.

    Inradius: distance to the nearest unoccupied site.  Outradius: distance
    to the farthest occupied site.  Both from exact integer squared norms.
    """
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.size == 0:
        raise ValueError("empty occupied set")
    n2 = xs * xs + ys * ys
    r_out = math.sqrt(int(n2.max()))
    w = int(math.floor(r_out)) + 2
    side = 2 * w + 1
    occ = np.zeros((side, side), dtype=bool)
    occ[xs + w, ys + w] = True
    g = np.arange(-w, w + 1, dtype=np.int64)
    g2 = (g * g)[:, None] + (g * g)[None, :]
    r_in = math.sqrt(int(g2[~occ].min()))
    return r_in, r_out, r_out - r_in


def recentered_stats(xs, ys, center):
    """Radius statistics with norms measured from a fractional center."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.size == 0:
        raise ValueError("empty occupied set")
    cx, cy = center
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    r_out = math.sqrt(float(d2.max()))
    w = int(math.floor(r_out + max(abs(cx), abs(cy)))) + 2
    side = 2 * w + 1
    occ = np.zeros((side, side), dtype=bool)
    occ[xs + w, ys + w] = True
    g = np.arange(-w, w + 1, dtype=np.float64)
    g2 = ((g - cx) ** 2)[:, None] + ((g - cy) ** 2)[None, :]
    r_in = math.sqrt(float(g2[~occ].min()))
    return r_in, r_out, r_out - r_in


def center_for_sequence(seq):
    return SEQUENCE_CENTERS.get(seq.upper())


def windowed_average(ns, values, n):
    """Mean of values over the size window I(n): [n/2, 3n/2] for n <= 1e6,
    else [n - 5e5, n + 5e5]."""
    ns = np.asarray(ns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if n <= 10 ** 6:
        lo, hi = n / 2.0, 1.5 * n
    else:
        lo, hi = n - 5e5, n + 5e5
    m = (ns >= lo) & (ns <= hi)
    if not m.any():
        raise ValueError("no samples inside the averaging window")
    return float(values[m].mean())


def complex_moments(xs, ys, n, m_max=100):
    """Power sums M_m = sum over cluster of (z/r)^m, m = 1..m_max, with
    z = x + iy and r = sqrt(n/pi).

    Computed by iterated multiplication; sums for m >= 50 use exact
    (Shewchuk) accumulation since the terms nearly cancel on symmetric
    clusters.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    r = math.sqrt(n / math.pi)
    z = (xs + 1j * ys) / r
    out = np.empty(m_max, dtype=np.complex128)
    cur = np.ones_like(z)
    for m in range(1, m_max + 1):
        cur = cur * z
        if m >= 50:
            out[m - 1] = math.fsum(cur.real) + 1j * math.fsum(cur.imag)
        else:
            out[m - 1] = cur.sum()
    return out


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: float


def fit_log(ns, means, transform="log"):
    """Ordinary least squares of means against ln(n) or ln(ln(n))."""
    ns = np.asarray(ns, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    if ns.size < 3 or np.any(np.diff(ns) <= 0):
        raise ValueError("need at least 3 strictly increasing sizes")
    if transform == "log":
        x = np.log(ns)
    elif transform == "loglog":
        x = np.log(np.log(ns))
    else:
        raise ValueError("transform must be 'log' or 'loglog'")
    if np.ptp(x) == 0:
        raise ValueError("degenerate abscissae")
    slope, intercept = np.polyfit(x, means, 1)
    pred = slope * x + intercept
    ss_res = float(((means - pred) ** 2).sum())
    ss_tot = float(((means - means.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(intercept), r2)


STATS_COLUMNS = ["model", "seq", "N", "a", "key_id", "lambda", "r_in", "r_out",
                 "diff", "diff_prime", "abs_err_u1", "max_err_u1",
                 "highest_hill", "deepest_hole", "runtime_ms"]

MOMENTS_COLUMNS = ["N", "a", "m", "re", "im"]


def stats_row(result, seq="", run=0, key_id="", lam=0.0, center=None):
    """One delimited-output row for a finished solve."""
    xs, ys = occupied_sites(result.sigma)
    r_in, r_out, diff = radius_stats(xs, ys)
    if center is None:
        center = center_for_sequence(seq) if seq else None
    if center is None:
        center = (float(xs.mean()), float(ys.mean()))
    _, _, diff_prime = recentered_stats(xs, ys, center)
    rep = result.report
    return {
        "model": rep.model.get("model", ""), "seq": seq, "N": rep.n,
        "a": run, "key_id": key_id, "lambda": lam,
        "r_in": f"{r_in:.6f}", "r_out": f"{r_out:.6f}",
        "diff": f"{diff:.6f}", "diff_prime": f"{diff_prime:.6f}",
        "abs_err_u1": rep.abs_err, "max_err_u1": rep.max_err,
        "highest_hill": rep.highest_hill, "deepest_hole": rep.deepest_hole,
        "runtime_ms": f"{rep.total_ms:.3f}",
    }
