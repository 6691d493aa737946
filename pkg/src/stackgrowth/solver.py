"""Three-phase exact solver: seed with the odometer estimate, annihilate
chip surpluses and deficits on a multiscale schedule, then unwind rotor
cycles.

Phase 1 performs all estimated firings in one aggregate pass.  Phase 2
repairs the chip field: a *hill* is a site with more than one chip, a
*hole* a site with negative chips or with zero chips despite having fired.
Each multiscale level confines the repairs to sites off a grid of
protected lines, so surpluses and deficits meet and cancel instead of
drifting; hills are always settled before holes within a level (hole
unfiring never creates a hill, while interleaving the two lets
deterministic fire/unfire orbits recur forever).  Phase 3 repeatedly
unfires directed cycles in the top-rotor configuration (no chips move)
until none remain.  The result then satisfies the odometer certificate,
hence equals the true final state of chip-by-chip simulation.

The inner loops are jitted worklist passes: periodic stacks use closed-form
element counts, the random models evaluate the counter PRF inline and keep
the urn state for below-frontier elements in a flat cache pool shared with
the stack model object.
"""

import math
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from numba import njit

from .engine import top_field, verify_odometer
from .lattice import DX, DY, Field
from .potential import approx_odometer
from .stacks import (_PERMS, IdlaStack, LowDiscrepancyStack, PeriodicStack,
                     _mulhi_scalar, _prf_word)

MULTISCALE_FACTOR = 1.9  # fastest schedule growth in practice

_STATUS_OK = 0
_STATUS_CAP = 1
_STATUS_BORDER = 2
_STATUS_WORKLIST = 3
_STATUS_POOL = 4
_STATUS_STUCK = 5


@dataclass
class SolveReport:
    n: int
    model: dict
    abs_err: int = 0            # sum |u1 - u|
    max_err: int = 0            # max |u1 - u|
    highest_hill: int = 0       # max chips at any site after phase 1
    deepest_hole: int = 0       # min chips at any site after phase 1
    fire_ops: int = 0
    unfire_ops: int = 0
    pop_unfires: int = 0
    fallback: bool = False
    factor: float = MULTISCALE_FACTOR
    phase_ms: list = dataclass_field(default_factory=lambda: [0.0, 0.0, 0.0])
    total_ms: float = 0.0

    def as_dict(self):
        return {
            "n": self.n, "model": self.model,
            "abs_err": self.abs_err, "max_err": self.max_err,
            "highest_hill": self.highest_hill, "deepest_hole": self.deepest_hole,
            "fire_ops": self.fire_ops, "unfire_ops": self.unfire_ops,
            "pop_unfires": self.pop_unfires, "fallback": self.fallback,
            "factor": self.factor, "phase_ms": list(self.phase_ms),
            "total_ms": self.total_ms,
        }


@dataclass
class SolveState:
    sigma: Field
    u: Field
    model: object
    u1: Field
    report: SolveReport


@dataclass
class SolveResult:
    u: Field
    sigma: Field
    top: Field
    report: SolveReport


def default_op_cap(n):
    return int(64 * n * math.log(n + 2))


def phase1_apply(u1, sigma0, model):
    """sigma1 = sigma0 + stack Laplacian of u1, via aggregate stack counts."""
    w = u1.half_width + 1
    sx, sy, sv = sigma0.support()
    if sx.size:
        w = max(w, int(max(np.abs(sx).max(), np.abs(sy).max())) + 1)
    sigma = Field(w)
    np.add.at(sigma.data, (sx + w, sy + w), sv)
    u = Field(w)
    xs, ys, uv = u1.support()
    if xs.size:
        u.data[xs + w, ys + w] = uv
        counts = model.range_counts(xs, ys, np.zeros_like(uv), uv)
        np.subtract.at(sigma.data, (xs + w, ys + w), uv)
        for d in range(4):
            np.add.at(sigma.data, (xs + int(DX[d]) + w, ys + int(DY[d]) + w),
                      counts[:, d])
    report = SolveReport(n=sigma0.total(), model=model.describe())
    report.highest_hill = int(sigma.data.max())
    report.deepest_hole = int(sigma.data.min())
    return SolveState(sigma=sigma, u=u, model=model, u1=u1.copy(), report=report)


def _hole_mask(sig, uu):
    return (sig < 0) | ((sig == 0) & (uu > 0))


def _support_radius(state):
    xs, ys = np.nonzero(state.sigma.data | state.u.data)
    if xs.size == 0:
        return 0
    w = state.sigma.half_width
    return int(max(np.abs(xs - w).max(), np.abs(ys - w).max()))


def _scan_candidates(state):
    sig = state.sigma.data
    uu = state.u.data
    bad = (sig > 1) | _hole_mask(sig, uu)
    ix, iy = np.nonzero(bad)
    w = state.sigma.half_width
    return ix - w, iy - w


# ---------------------------------------------------------------------------
# jitted worklist passes
# ---------------------------------------------------------------------------

@njit(cache=True)
def _periodic_pass(sig, uu, jdir, side, period, holes_pass, cap):  # pragma: no cover
    """Settle every hill (or hole) off the period-L grid lines, for cyclic
    stacks with closed-form element counts."""
    w = side // 2
    n_cells = side * side
    stack = np.empty(n_cells + 16, dtype=np.int64)
    top = 0
    for f in range(n_cells):
        s = sig[f]
        if holes_pass == 0:
            bad = s > 1
        else:
            bad = (s < 0) or (s == 0 and uu[f] > 0)
        if bad:
            stack[top] = f
            top += 1
    ops = 0
    cap_stack = stack.size - 8
    while top > 0:
        top -= 1
        f = stack[top]
        s = sig[f]
        if holes_pass == 0:
            if s <= 1:
                continue
        else:
            if not (s < 0 or (s == 0 and uu[f] > 0)):
                continue
        ix = f // side
        iy = f % side
        if period > 1 and ((ix - w) % period == 0 or (iy - w) % period == 0):
            continue
        if ix <= 0 or ix >= side - 1 or iy <= 0 or iy >= side - 1:
            return ops, _STATUS_BORDER
        if top >= cap_stack:
            # no headroom for this op's pushes; park and let the caller
            # reseed (state is untouched, so this is always safe)
            stack[top] = f
            top += 1
            return ops, _STATUS_WORKLIST
        if holes_pass == 0:
            j = s - 1
            lo = uu[f]
            uu[f] = lo + j
            sig[f] = 1
        else:
            j = 1 - s
            if uu[f] < j:
                j = uu[f]
            lo = uu[f] - j
            uu[f] = lo
            sig[f] = s + j
        ops += j
        for d in range(4):
            c = (lo + j + 4 - jdir[d]) // 4 - (lo + 4 - jdir[d]) // 4
            if c == 0:
                continue
            if d == 0:
                g = f + 1
            elif d == 1:
                g = f + side
            elif d == 2:
                g = f - 1
            else:
                g = f - side
            t = sig[g]
            if holes_pass == 0:
                sig[g] = t + c
                became_bad = t <= 1 and t + c > 1
            else:
                sig[g] = t - c
                became_bad = (not (t < 0 or (t == 0 and uu[g] > 0))) \
                    and (t - c < 0 or (t - c == 0 and uu[g] > 0))
            if became_bad:
                gx = g // side
                gy = g % side
                if period <= 1 or ((gx - w) % period != 0
                                   and (gy - w) % period != 0):
                    stack[top] = g
                    top += 1
        if ops > cap:
            return ops, _STATUS_CAP
    return ops, _STATUS_OK


@njit(cache=True, inline="always")
def _element_code(x, y, k, rks, run, kind, perms,
                  aux_w, fz, kc, r4, woff, wcap, pool, pool_state):  # pragma: no cover
    """Stack element k at (x, y) for the random models, drawing and caching
    urn elements below the frontier as needed.  Returns (code, status)."""
    if kind == 1:  # independent block permutations, blocks at 4j+1..4j+4
        if k <= 0:
            v = _prf_word(x, y, 1 << 33, run, rks)
            return np.int64(v >> np.uint64(62)), _STATUS_OK
        v = _prf_word(x, y, (k - 1) >> 2, run, rks)
        pi = _mulhi_scalar(v, 24)
        return np.int64(perms[pi, (k - 1) & 3]), _STATUS_OK
    aside = 2 * aux_w + 1
    a = -1
    if -aux_w <= x <= aux_w and -aux_w <= y <= aux_w:
        a = (x + aux_w) * aside + (y + aux_w)
    f = fz[a] if a >= 0 else 0
    if k > f or k <= 0:
        v = _prf_word(x, y, k, run, rks)
        return np.int64(v >> np.uint64(62)), _STATUS_OK
    if kc[a] >= k:
        need = f - (k - 1)
        if wcap[a] < need:
            cap = 16
            while cap < need:
                cap *= 2
            end = pool_state[0]
            if end + cap > pool.size:
                return np.int64(0), _STATUS_POOL
            used = f - kc[a]
            if used > 0:
                src = woff[a]
                for i in range(used):
                    pool[end + i] = pool[src + i]
            woff[a] = end
            wcap[a] = cap
            pool_state[0] = end + cap
        base = woff[a] + f
        kk = kc[a]
        while kk >= k:
            v = _prf_word(x, y, kk, run, rks)
            ball = _mulhi_scalar(v, kk)
            c0 = np.uint64(r4[0, a])
            c1 = c0 + np.uint64(r4[1, a])
            c2 = c1 + np.uint64(r4[2, a])
            if ball < c0:
                e = 0
            elif ball < c1:
                e = 1
            elif ball < c2:
                e = 2
            else:
                e = 3
            r4[e, a] -= 1
            pool[base - kk] = e
            kk -= 1
        kc[a] = kk
    return np.int64(pool[woff[a] + f - k]), _STATUS_OK


@njit(cache=True)
def _random_pass(sig, uu, side, period, holes_pass, cap, rks, run, kind, perms,
                 aux_w, fz, kc, r4, woff, wcap, pool, pool_state):  # pragma: no cover
    """Settle every hill (or hole) off the period-L grid lines for the
    random-stack models, evaluating stack elements inline."""
    w = side // 2
    n_cells = side * side
    stack = np.empty(n_cells + 16, dtype=np.int64)
    top = 0
    for f in range(n_cells):
        s = sig[f]
        if holes_pass == 0:
            bad = s > 1
        else:
            bad = (s < 0) or (s == 0 and uu[f] > 0)
        if bad:
            stack[top] = f
            top += 1
    ops = 0
    cap_stack = stack.size - 8
    counts = np.zeros(4, dtype=np.int64)
    while top > 0:
        top -= 1
        f = stack[top]
        s = sig[f]
        if holes_pass == 0:
            if s <= 1:
                continue
        else:
            if not (s < 0 or (s == 0 and uu[f] > 0)):
                continue
        ix = f // side
        iy = f % side
        if period > 1 and ((ix - w) % period == 0 or (iy - w) % period == 0):
            continue
        if ix <= 0 or ix >= side - 1 or iy <= 0 or iy >= side - 1:
            return ops, _STATUS_BORDER
        if top >= cap_stack:
            stack[top] = f
            top += 1
            return ops, _STATUS_WORKLIST
        x = ix - w
        y = iy - w
        if holes_pass == 0:
            j = s - 1
            lo = uu[f]
        else:
            j = 1 - s
            if uu[f] < j:
                j = uu[f]
            lo = uu[f] - j
        counts[0] = 0
        counts[1] = 0
        counts[2] = 0
        counts[3] = 0
        for k in range(lo + 1, lo + j + 1):
            code, status = _element_code(x, y, k, rks, run, kind, perms,
                                         aux_w, fz, kc, r4, woff, wcap,
                                         pool, pool_state)
            if status != _STATUS_OK:
                stack[top] = f  # retry this site after the pool grows
                top += 1
                return ops, status
            counts[code] += 1
        if holes_pass == 0:
            uu[f] = lo + j
            sig[f] = 1
        else:
            uu[f] = lo
            sig[f] = s + j
        ops += j
        for d in range(4):
            c = counts[d]
            if c == 0:
                continue
            if d == 0:
                g = f + 1
            elif d == 1:
                g = f + side
            elif d == 2:
                g = f - 1
            else:
                g = f - side
            t = sig[g]
            if holes_pass == 0:
                sig[g] = t + c
                became_bad = t <= 1 and t + c > 1
            else:
                sig[g] = t - c
                became_bad = (not (t < 0 or (t == 0 and uu[g] > 0))) \
                    and (t - c < 0 or (t - c == 0 and uu[g] > 0))
            if became_bad:
                gx = g // side
                gy = g % side
                if period <= 1 or ((gx - w) % period != 0
                                   and (gy - w) % period != 0):
                    stack[top] = g
                    top += 1
        if ops > cap:
            return ops, _STATUS_CAP
    return ops, _STATUS_OK


@njit(cache=True)
def _random_pass_tandem(sig, uu, side, period, cap, rks, run, kind, perms,
                        aux_w, fz, kc, r4, woff, wcap, pool, pool_state):  # pragma: no cover
    """Tandem FIFO pass for the random-stack models: each dequeued site is
    fired flat if it is a hill and unfired flat if it is a hole.  Breadth-
    first order advances all surpluses and deficits in lockstep waves, so
    the two populations collide and cancel instead of single walkers
    running away depth-first.

    The dynamics are deterministic, so a recurrent fire/unfire orbit is
    possible in principle; a hash of (site, ops so far) occasionally defers
    a site, and since the counter only advances, no state can recur
    exactly.  A stall detector watching the count of unresolved off-line
    sites hands pathological cases to the monotone order."""
    w = side // 2
    n_cells = side * side
    qcap = n_cells + 16
    qf = np.empty(qcap, dtype=np.int64)
    qx = np.empty(qcap, dtype=np.int64)
    qy = np.empty(qcap, dtype=np.int64)
    head = 0
    tail = 0
    bad_count = 0
    for f in range(n_cells):
        s = sig[f]
        if s > 1 or s < 0 or (s == 0 and uu[f] > 0):
            x = f // side - w
            y = f % side - w
            qf[tail] = f
            qx[tail] = x
            qy[tail] = y
            tail = (tail + 1) % qcap
            if period <= 1 or (x % period != 0 and y % period != 0):
                bad_count += 1
    fires = 0
    unfires = 0
    defers = 0
    best = bad_count
    ops_at_best = 0
    c0 = np.zeros(4, dtype=np.int64)
    while head != tail:
        f = qf[head]
        x = qx[head]
        y = qy[head]
        head = (head + 1) % qcap
        s = sig[f]
        hill = s > 1
        if not hill and not (s < 0 or (s == 0 and uu[f] > 0)):
            continue
        if period > 1 and (x % period == 0 or y % period == 0):
            continue
        if x <= -w or x >= w or y <= -w or y >= w:
            return fires, unfires, _STATUS_BORDER
        free = (head - tail - 1) % qcap
        if free < 8:
            qf[tail] = f
            qx[tail] = x
            qy[tail] = y
            tail = (tail + 1) % qcap
            return fires, unfires, _STATUS_WORKLIST
        total = fires + unfires + defers
        dither = (np.uint64(f) * np.uint64(0x9E3779B97F4A7C15)
                  ^ np.uint64(total) * np.uint64(0xBF58476D1CE4E5B9))
        if dither >> np.uint64(60) == np.uint64(0):
            defers += 1  # the advancing counter keeps any orbit from recurring
            qf[tail] = f
            qx[tail] = x
            qy[tail] = y
            tail = (tail + 1) % qcap
            continue
        if hill:
            j = s - 1
            lo = uu[f]
        else:
            j = 1 - s
            if uu[f] < j:
                j = uu[f]
            lo = uu[f] - j
        c0[0] = 0
        c0[1] = 0
        c0[2] = 0
        c0[3] = 0
        for k in range(lo + 1, lo + j + 1):
            code, status = _element_code(x, y, k, rks, run, kind, perms,
                                         aux_w, fz, kc, r4, woff, wcap,
                                         pool, pool_state)
            if status != _STATUS_OK:
                qf[tail] = f
                qx[tail] = x
                qy[tail] = y
                tail = (tail + 1) % qcap
                return fires, unfires, status
            c0[code] += 1
        if hill:
            uu[f] = lo + j
            sig[f] = 1
            fires += j
        else:
            uu[f] = lo
            sig[f] = s + j
            unfires += j
        bad_count -= 1
        for d in range(4):
            c = c0[d]
            if c == 0:
                continue
            if d == 0:
                g = f + 1
                gx = x
                gy = y + 1
            elif d == 1:
                g = f + side
                gx = x + 1
                gy = y
            elif d == 2:
                g = f - 1
                gx = x
                gy = y - 1
            else:
                g = f - side
                gx = x - 1
                gy = y
            t = sig[g]
            was_bad = t > 1 or t < 0 or (t == 0 and uu[g] > 0)
            if hill:
                sig[g] = t + c
            else:
                sig[g] = t - c
            t = sig[g]
            now_bad = t > 1 or t < 0 or (t == 0 and uu[g] > 0)
            if now_bad != was_bad:
                if period <= 1 or (gx % period != 0 and gy % period != 0):
                    if now_bad:
                        bad_count += 1
                        qf[tail] = g
                        qx[tail] = gx
                        qy[tail] = gy
                        tail = (tail + 1) % qcap
                    else:
                        bad_count -= 1
        total = fires + unfires
        if total > cap:
            return fires, unfires, _STATUS_CAP
        if bad_count < best:
            best = bad_count
            ops_at_best = total
        elif total - ops_at_best > 512 * (bad_count + 16):
            return fires, unfires, _STATUS_STUCK
    return fires, unfires, _STATUS_OK


def _model_kernel_args(model):
    """(kind, run, round keys, perms, aux arrays) for the jitted passes."""
    dummy = (0, np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64),
             np.zeros((4, 1), dtype=np.int64), np.zeros(1, dtype=np.int64),
             np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.uint8),
             np.zeros(1, dtype=np.int64))
    if isinstance(model, LowDiscrepancyStack):
        return (1, model.run, model.prf.round_keys, _PERMS) + dummy
    aux_w, fz, kc, r4, woff, wcap = model.kernel_state()
    pool_state = np.array([model.pool_end], dtype=np.int64)
    return (0, model.run, model.prf.round_keys, _PERMS,
            aux_w, fz, kc, r4, woff, wcap, model.pool, pool_state)


def _run_pass(state, period, holes_pass, cap):
    """Drive one jitted settle pass to completion, handling box growth,
    worklist refills and pool growth."""
    model = state.model
    periodic = isinstance(model, PeriodicStack)
    while True:
        side = state.sigma.side
        sig = state.sigma.data.reshape(-1)
        uu = state.u.data.reshape(-1)
        if periodic:
            ops, status = _periodic_pass(sig, uu, model._j, side, period,
                                         holes_pass, cap)
        else:
            (kind, run, rks, perms, aux_w, fz, kc, r4, woff, wcap, pool,
             pool_state) = _model_kernel_args(model)
            ops, status = _random_pass(sig, uu, side, period, holes_pass,
                                       cap, rks, run, kind, perms, aux_w,
                                       fz, kc, r4, woff, wcap, pool,
                                       pool_state)
            if isinstance(model, IdlaStack):
                model.pool_end = int(pool_state[0])
        if holes_pass == 0:
            state.report.fire_ops += ops
        else:
            state.report.unfire_ops += ops
        cap -= ops
        if status == _STATUS_CAP:
            return True
        if status == _STATUS_BORDER:
            state.sigma.ensure_radius(state.sigma.half_width + 16)
            state.u.ensure_radius(state.sigma.half_width)
            continue
        if status == _STATUS_WORKLIST:
            continue
        if status == _STATUS_POOL:
            model._grow_pool(max(1 << 16, model.pool.size))
            continue
        return False


def _run_tandem(state, period, budget):
    """Drive the tandem pass to completion or budget exhaustion."""
    model = state.model
    while True:
        side = state.sigma.side
        sig = state.sigma.data.reshape(-1)
        uu = state.u.data.reshape(-1)
        (kind, run, rks, perms, aux_w, fz, kc, r4, woff, wcap, pool,
         pool_state) = _model_kernel_args(model)
        fires, unfires, status = _random_pass_tandem(
            sig, uu, side, period, budget, rks, run, kind, perms, aux_w,
            fz, kc, r4, woff, wcap, pool, pool_state)
        if isinstance(model, IdlaStack):
            model.pool_end = int(pool_state[0])
        state.report.fire_ops += fires
        state.report.unfire_ops += unfires
        budget -= fires + unfires
        if status == _STATUS_BORDER:
            state.sigma.ensure_radius(state.sigma.half_width + 16)
            state.u.ensure_radius(state.sigma.half_width)
            continue
        if status == _STATUS_WORKLIST:
            continue
        if status == _STATUS_POOL:
            model._grow_pool(max(1 << 16, model.pool.size))
            continue
        return status


def _anneal(state, grid_period, cap):
    """Clear all hills and holes off the protected grid lines.

    Random models interleave: each worklist site is fired if a hill and
    unfired if a hole, so surpluses and deficits cancel on contact; a
    budget (generous against the current error mass) bounds the recurrent
    fire/unfire orbits these deterministic dynamics can enter, after which
    the level reruns in the monotone hills-then-holes order (hole unfiring
    never creates a hill, so one round trip is clean).  Periodic stacks
    skip straight to the monotone order: their coherent rotor patterns
    lock interleaved passes into orbits almost immediately, while their
    surplus/deficit walks are short and cheap.
    """
    if grid_period == 1:
        return False
    period = 0 if grid_period is None else grid_period
    if not isinstance(state.model, PeriodicStack):
        remaining = cap - state.report.fire_ops - state.report.unfire_ops
        status = _run_tandem(state, period, remaining)
        if status == _STATUS_OK:
            return False
        if status == _STATUS_CAP:
            return True
    remaining = cap - state.report.fire_ops - state.report.unfire_ops
    if _run_pass(state, period, 1, remaining):
        return True
    remaining = cap - state.report.fire_ops - state.report.unfire_ops
    return _run_pass(state, period, 0, remaining)


def _anneal_fallback(state):
    """Termination-guaranteed cleanup: settle every hill anywhere, then
    unfire holes until none remain.  Used when the operation cap trips."""
    _run_pass(state, 0, 0, 1 << 62)
    _run_pass(state, 0, 1, 1 << 62)


def phase2_annihilate(state, factor=MULTISCALE_FACTOR, op_cap=None):
    """Eliminate all hills and holes via the multiscale schedule.

    Grid periods grow as L_1 = 1, L_{i+1} = ceil(factor * L_i) until the
    period exceeds the cluster diameter, followed by an unrestricted final
    pass.  Each level settles hills first, then holes.  A safety cap on
    total operations triggers a cap-free hills-first cleanup.
    """
    if op_cap is None:
        op_cap = default_op_cap(state.report.n)
    state.report.factor = factor
    level = 1
    while True:
        diameter = 2 * _support_radius(state) + 1
        if level > diameter:
            break
        breached = _anneal(state, level, op_cap)
        if breached:
            state.report.fallback = True
            _anneal_fallback(state)
            break
        level = int(math.ceil(factor * level))
    if not state.report.fallback:
        breached = _anneal(state, None, op_cap)
        if breached:
            state.report.fallback = True
            _anneal_fallback(state)
    sig = state.sigma.data
    uu = state.u.data
    assert sig.max() <= 1 and sig.min() >= 0, "annihilation left a hill or hole"
    assert not ((sig == 0) & (uu > 0)).any(), "fired site lost its chip"
    assert uu.min() >= 0
    return state


# ---------------------------------------------------------------------------
# cycle popping
# ---------------------------------------------------------------------------

@njit(cache=True)
def _pop_cycles_periodic(u, top, in_a, starts, side, seq, step):  # pragma: no cover
    color = np.zeros(u.size, dtype=np.uint8)
    path = np.empty(u.size + 1, dtype=np.int64)
    pops = 0
    for si in range(starts.size):
        start = starts[si]
        if not in_a[start] or color[start] != 0:
            continue
        depth = 0
        cur = start
        while True:
            if not in_a[cur] or color[cur] == 2:
                for i in range(depth):
                    color[path[i]] = 2
                break
            if color[cur] == 1:
                j = depth - 1
                while path[j] != cur:
                    j -= 1
                for i in range(j, depth):
                    s = path[i]
                    u[s] -= 1
                    pops += 1
                    color[s] = 0
                    if u[s] == 0:
                        in_a[s] = False
                    else:
                        top[s] = seq[u[s] & 3]
                depth = j
                continue
            color[cur] = 1
            path[depth] = cur
            depth += 1
            cur = cur + step[top[cur]]
    return pops


@njit(cache=True)
def _pop_cycles_random(u, top, in_a, starts, side, step, rks, run, kind, perms,
                       aux_w, fz, kc, r4, woff, wcap, pool, pool_state):  # pragma: no cover
    color = np.zeros(u.size, dtype=np.uint8)
    path = np.empty(u.size + 1, dtype=np.int64)
    pops = 0
    w = side // 2
    for si in range(starts.size):
        start = starts[si]
        if not in_a[start] or color[start] != 0:
            continue
        depth = 0
        cur = start
        while True:
            if not in_a[cur] or color[cur] == 2:
                for i in range(depth):
                    color[path[i]] = 2
                break
            if color[cur] == 1:
                j = depth - 1
                while path[j] != cur:
                    j -= 1
                for i in range(j, depth):
                    s = path[i]
                    u[s] -= 1
                    pops += 1
                    color[s] = 0
                    if u[s] == 0:
                        in_a[s] = False
                    else:
                        code, status = _element_code(
                            s // side - w, s % side - w, u[s], rks, run, kind,
                            perms, aux_w, fz, kc, r4, woff, wcap, pool,
                            pool_state)
                        if status != _STATUS_OK:
                            return pops, status
                        top[s] = code
                depth = j
                continue
            color[cur] = 1
            path[depth] = cur
            depth += 1
            cur = cur + step[top[cur]]
    return pops, _STATUS_OK


def phase3_pop_cycles(state):
    """Unfire directed top-rotor cycles until none remain on the fired set.

    Each cycle pop decrements the odometer along the cycle and moves no
    chips; termination is guaranteed because the odometer total strictly
    decreases."""
    u = state.u
    w = u.half_width
    side = 2 * w + 1
    ix, iy = np.nonzero(u.data)
    if ix.size == 0:
        return state
    order = np.lexsort((iy, ix))
    ix, iy = ix[order], iy[order]
    flat = ix * side + iy
    uflat = u.data.reshape(-1).copy()
    in_a = np.zeros(side * side, dtype=bool)
    in_a[flat] = True
    top = np.zeros(side * side, dtype=np.uint8)
    top[flat] = state.model.tops(ix - w, iy - w, u.data[ix, iy])
    sigma_total = int(state.sigma.data.sum())
    step = np.array([int(DX[d]) * side + int(DY[d]) for d in range(4)],
                    dtype=np.int64)
    if isinstance(state.model, PeriodicStack):
        pops = int(_pop_cycles_periodic(uflat, top, in_a, flat, side,
                                        state.model.codes.astype(np.int64),
                                        step))
    else:
        model = state.model
        pops = 0
        while True:
            (kind, run, rks, perms, aux_w, fz, kc, r4, woff, wcap, pool,
             pool_state) = _model_kernel_args(model)
            done, status = _pop_cycles_random(uflat, top, in_a, flat, side,
                                              step, rks, run, kind, perms,
                                              aux_w, fz, kc, r4, woff, wcap,
                                              pool, pool_state)
            pops += int(done)
            if isinstance(model, IdlaStack):
                model.pool_end = int(pool_state[0])
            if status == _STATUS_POOL:
                # popping an intermediate set of cycles is itself valid, so
                # restarting the scan after growing the pool stays exact
                model._grow_pool(max(1 << 16, model.pool.size))
                continue
            break
    u.data = uflat.reshape(side, side)
    state.report.pop_unfires += int(pops)
    assert int(state.sigma.data.sum()) == sigma_total, \
        "cycle popping moved chips"
    return state


def solve(model, n, u1=None, factor=MULTISCALE_FACTOR, crossover=100,
          op_cap=None, verify=False):
    """Compute the exact final state of n chips dropped at the origin.

    Returns a :class:`SolveResult` with the odometer, the final chip field,
    the final top rotors (on fired and occupied sites), and a report of
    estimate quality and work done.  When ``verify`` is set the certificate
    is checked and a failure raises ``RuntimeError``.
    """
    t0 = time.perf_counter()
    n = int(n)
    if n < 1:
        raise ValueError("need at least one chip")
    if u1 is None:
        u1 = approx_odometer(n, crossover=crossover).u
    if isinstance(model, IdlaStack) and not model.primed:
        model.prime(u1)
    sigma0 = Field(u1.half_width)
    sigma0[(0, 0)] = n

    state = phase1_apply(u1, sigma0, model)
    t1 = time.perf_counter()
    phase2_annihilate(state, factor=factor, op_cap=op_cap)
    t2 = time.perf_counter()
    phase3_pop_cycles(state)
    t3 = time.perf_counter()

    w = state.u.half_width
    diff = state.u.data.copy()
    xs, ys, uv = state.u1.support()
    np.subtract.at(diff, (xs + w, ys + w), uv)
    state.report.abs_err = int(np.abs(diff).sum())
    state.report.max_err = int(np.abs(diff).max()) if diff.size else 0
    state.report.phase_ms = [(t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3]

    ox, oy = np.nonzero(state.sigma.data == 1)
    top = top_field(model, state.u, extra_sites=(ox - w, oy - w))
    if verify:
        res = verify_odometer(state.u, sigma0, model)
        if not res.ok:
            raise RuntimeError(f"internal consistency failure: {res}")
    state.report.total_ms = (time.perf_counter() - t0) * 1e3
    return SolveResult(u=state.u, sigma=state.sigma, top=top,
                       report=state.report)
