"""Core abelian-stack semantics on Z^2, plus a small-graph backend.

The lattice engine provides the stack Laplacian, single firings and
unfirings, a step-by-step oracle simulator, and the odometer certificate
(no site with more than one chip, every fired site keeps exactly one chip,
no rotor cycles among fired sites).  The certificate uniquely identifies
the odometer, so it can validate output produced by any other route.

The small-graph backend runs the same semantics on arbitrary finite
strongly-connected directed graphs with explicit stack prefixes; it backs
the stack-exchange and cycle-removal property checks.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .lattice import DX, DY, Field

_NO_TOP = 0  # top fields store direction code + 1; 0 means "no rotor tracked"


def stack_laplacian(u, model):
    """Net chip change from firing every site x exactly u(x) times.

    delta(x) = sum over incoming edges e of R(e, u(source(e))) - u(x),
    where R counts occurrences of e among the first u(source) stack elements.
    """
    xs, ys, uv = u.support()
    out = Field(max(8, u.half_width + 1))
    if xs.size == 0:
        return out
    out.ensure_radius(int(max(np.abs(xs).max(), np.abs(ys).max())) + 1)
    w = out.half_width
    counts = model.range_counts(xs, ys, np.zeros_like(uv), uv)
    np.subtract.at(out.data, (xs + w, ys + w), uv)
    for d in range(4):
        np.add.at(out.data, (xs + int(DX[d]) + w, ys + int(DY[d]) + w), counts[:, d])
    return out


def fire(sigma, u, model, site):
    """Fire ``site`` once: advance its stack and emit one chip along the
    newly revealed element.  Legality (more than one chip present) is the
    caller's concern."""
    x, y = site
    k = u[site] + 1
    u[site] = k
    d = model.rotor(site, k)
    sigma.add(x, y, -1)
    sigma.add(x + int(DX[d]), y + int(DY[d]), 1)
    return d


def unfire(sigma, u, model, site):
    """Exact inverse of :func:`fire`: pull the last emitted chip back."""
    x, y = site
    k = u[site]
    assert k >= 1, "cannot unfire a site that never fired"
    d = model.rotor(site, k)
    sigma.add(x + int(DX[d]), y + int(DY[d]), -1)
    sigma.add(x, y, 1)
    u[site] = k - 1
    return d


def bulk_fire(model, sigma, u, xs, ys, times):
    """Fire each site xs[i], ys[i] exactly times[i] times, in one aggregate
    step.  Sites must be distinct and lie strictly inside the current box."""
    w = sigma.half_width
    ix, iy = xs + w, ys + w
    u0 = u.data[ix, iy]
    counts = model.range_counts(xs, ys, u0, u0 + times)
    u.data[ix, iy] = u0 + times
    sigma.data[ix, iy] -= times
    for d in range(4):
        np.add.at(sigma.data, (ix + int(DX[d]), iy + int(DY[d])), counts[:, d])


def bulk_unfire(model, sigma, u, xs, ys, times):
    """Unfire each site times[i] times: retract the chips sent by its last
    times[i] firings."""
    w = sigma.half_width
    ix, iy = xs + w, ys + w
    u0 = u.data[ix, iy]
    counts = model.range_counts(xs, ys, u0 - times, u0)
    u.data[ix, iy] = u0 - times
    sigma.data[ix, iy] += times
    for d in range(4):
        np.subtract.at(sigma.data, (ix + int(DX[d]), iy + int(DY[d])), counts[:, d])


def top_field(model, u, extra_sites=None):
    """Rotor configuration on the stack tops after u firings, as a Field
    storing direction code + 1 (0 where untracked).

    Tracks the support of u plus any ``extra_sites`` (xs, ys) arrays --
    typically the occupied cluster, whose never-fired boundary sites expose
    stack element 0.
    """
    xs, ys, uv = u.support()
    if extra_sites is not None:
        ex, ey = extra_sites
        xs = np.concatenate([xs, ex])
        ys = np.concatenate([ys, ey])
        uv = np.concatenate([uv, np.zeros(ex.size, dtype=np.int64)])
        key = xs * (np.int64(1) << np.int64(32)) + ys
        _, first = np.unique(key, return_index=True)
        xs, ys, uv = xs[first], ys[first], uv[first]
    out = Field(max(8, u.half_width))
    if xs.size == 0:
        return out
    out.ensure_radius(int(max(np.abs(xs).max(), np.abs(ys).max())))
    w = out.half_width
    out.data[xs + w, ys + w] = model.tops(xs, ys, uv).astype(np.int64) + 1
    return out


def oracle_simulate(model, sigma0, order="batch", rng=None):
    """Run the growth process by legal firings until stable.

    A firing of x is legal while x holds more than one chip (the first chip
    to reach a site is absorbed there).  The final state does not depend on
    the firing order; ``order`` selects the execution strategy:

    * ``"batch"`` -- fire every currently unstable site down to one chip per
      sweep, using aggregate stack counts (fast path);
    * ``"fifo"`` -- one firing at a time from a FIFO queue;
    * ``"random"`` -- one firing at a time at a uniformly random unstable
      site (requires ``rng``).

    Returns (odometer Field, final chip Field, top Field).
    """
    sigma = sigma0.copy()
    u = Field(sigma.half_width)
    if order == "batch":
        _oracle_batch(model, sigma, u)
    else:
        _oracle_scalar(model, sigma, u, order, rng)
    ox, oy, ov = sigma.support()
    occ = ov == 1
    top = top_field(model, u, extra_sites=(ox[occ], oy[occ]))
    return u, sigma, top


def _oracle_batch(model, sigma, u):
    xs, ys, vals = sigma.support()
    m = vals > 1
    xs, ys = xs[m], ys[m]
    while xs.size:
        reach = int(max(np.abs(xs).max(), np.abs(ys).max())) + 1
        if reach >= sigma.half_width:
            sigma.ensure_radius(reach + 8)
        u.ensure_radius(sigma.half_width)
        w = sigma.half_width
        times = sigma.data[xs + w, ys + w] - 1
        bulk_fire(model, sigma, u, xs, ys, times)
        # candidates for the next sweep: the fired sites and their neighbors
        cand_x = np.concatenate([xs + int(dx) for dx in (0, 0, 1, 0, -1)])
        cand_y = np.concatenate([ys + int(dy) for dy in (0, 1, 0, -1, 0)])
        key = (cand_x + w).astype(np.int64) * (2 * w + 1) + (cand_y + w)
        _, first = np.unique(key, return_index=True)
        cand_x, cand_y = cand_x[first], cand_y[first]
        unstable = sigma.data[cand_x + w, cand_y + w] > 1
        xs, ys = cand_x[unstable], cand_y[unstable]


def _oracle_scalar(model, sigma, u, order, rng):
    if order == "random" and rng is None:
        raise ValueError("random firing order needs an rng")
    xs, ys, vals = sigma.support()
    queue = deque((int(x), int(y)) for x, y, v in zip(xs, ys, vals) if v > 1)
    while queue:
        if order == "random":
            i = int(rng.integers(len(queue)))
            queue[i], queue[-1] = queue[-1], queue[i]
            site = queue.pop()
        else:
            site = queue.popleft()
        if sigma[site] <= 1:
            continue
        d = fire(sigma, u, model, site)
        nbr = (site[0] + int(DX[d]), site[1] + int(DY[d]))
        if sigma[nbr] > 1:
            queue.append(nbr)
        if sigma[site] > 1:
            queue.append(site)


@dataclass
class VerifyResult:
    status: str           # "ok" | "hill" | "hole" | "cycle"
    site: tuple = None    # witness site for hill/hole
    cycle: list = None    # witness cycle for cycle failures

    @property
    def ok(self):
        return self.status == "ok"

    def __str__(self):
        if self.ok:
            return "ok"
        if self.status == "cycle":
            return f"cycle({self.cycle})"
        return f"{self.status}_at({self.site[0]},{self.site[1]})"


def _lex_smallest(xs, ys):
    order = np.lexsort((ys, xs))
    return int(xs[order[0]]), int(ys[order[0]])


def verify_odometer(u_star, sigma0, model):
    """Certify a candidate odometer.

    Computes the chip configuration after performing u_star firings and
    checks: no site holds more than one chip; every site that fired keeps
    exactly one chip; the top rotors are acyclic on the fired set.  A
    candidate passing all three IS the odometer of the process, so ``ok``
    is a proof of exactness.  Witnesses are reported deterministically
    (lexicographically smallest site; first cycle in lexicographic scan
    order).
    """
    sigma_star = stack_laplacian(u_star, model)
    sx, sy, sv = sigma0.support()
    sigma_star.ensure_radius(max(8, int(max(np.abs(sx).max(), np.abs(sy).max(), 0)) if sx.size else 8))
    w = sigma_star.half_width
    np.add.at(sigma_star.data, (sx + w, sy + w), sv)

    hx, hy = np.nonzero(sigma_star.data > 1)
    if hx.size:
        return VerifyResult("hill", site=_lex_smallest(hx - w, hy - w))

    ux, uy, uv = u_star.support()
    if (uv < 0).any():
        bad = uv < 0
        return VerifyResult("hole", site=_lex_smallest(ux[bad], uy[bad]))
    holes = sigma_star.values(ux, uy) != 1
    if holes.any():
        return VerifyResult("hole", site=_lex_smallest(ux[holes], uy[holes]))

    cyc = _find_top_cycle(model, u_star, ux, uy, uv)
    if cyc is not None:
        return VerifyResult("cycle", cycle=cyc)
    return VerifyResult("ok")


def _find_top_cycle(model, u_star, ux, uy, uv):
    """First directed cycle of the top-rotor map on supp(u), or None."""
    if ux.size == 0:
        return None
    w = int(max(np.abs(ux).max(), np.abs(uy).max())) + 1
    side = 2 * w + 1
    in_a = np.zeros(side * side, dtype=bool)
    tops = np.zeros(side * side, dtype=np.int64)
    flat = (ux + w) * side + (uy + w)
    order = np.lexsort((uy, ux))
    flat = flat[order]
    in_a[flat] = True
    tops[flat] = model.tops(ux[order], uy[order], uv[order]).astype(np.int64)
    step = np.array([int(DX[d]) * side + int(DY[d]) for d in range(4)], dtype=np.int64)
    color = np.zeros(side * side, dtype=np.uint8)  # 0 white, 1 on path, 2 done
    for start in flat.tolist():
        if color[start]:
            continue
        path = []
        cur = start
        while True:
            if not in_a[cur] or color[cur] == 2:
                for p in path:
                    color[p] = 2
                break
            if color[cur] == 1:
                i = path.index(cur)
                return [(int(f // side) - w, int(f % side) - w) for f in path[i:]]
            color[cur] = 1
            path.append(cur)
            cur = int(cur + step[tops[cur]])
    return None


# ---------------------------------------------------------------------------
# small arbitrary directed graphs
# ---------------------------------------------------------------------------

class SmallGraph:
    """Finite directed graph with explicit stack prefixes, for the corollary
    property checks.

    ``edges`` is a list of (source, target) pairs; self-loops and multiple
    edges are allowed.  ``stacks[v]`` lists stack elements as indices into
    the out-edge list of v (in edge insertion order).  Beyond the explicit
    prefix, element k falls back to out-edge k mod out-degree, which keeps
    every stack infinitive.
    """

    def __init__(self, n, edges, stacks=None):
        self.n = int(n)
        self.edges = [(int(s), int(t)) for s, t in edges]
        self.out_edges = [[] for _ in range(self.n)]
        for i, (s, t) in enumerate(self.edges):
            if not (0 <= s < self.n and 0 <= t < self.n):
                raise ValueError("edge endpoint out of range")
            self.out_edges[s].append(i)
        if any(len(o) == 0 for o in self.out_edges):
            raise ValueError("every vertex needs at least one outgoing edge")
        self.stacks = [list(s) for s in (stacks or [[] for _ in range(self.n)])]
        for v, st in enumerate(self.stacks):
            deg = len(self.out_edges[v])
            if any(not (0 <= i < deg) for i in st):
                raise ValueError("stack entry is not a valid out-edge index")

    def element(self, v, k):
        """Edge id of stack element k at vertex v."""
        st = self.stacks[v]
        out = self.out_edges[v]
        if k < len(st):
            return out[st[k]]
        return out[k % len(out)]

    def count(self, edge_id, n):
        """Occurrences of the edge among stack elements 1..n at its source."""
        v = self.edges[edge_id][0]
        return sum(1 for k in range(1, n + 1) if self.element(v, k) == edge_id)

    def materialized(self, horizon):
        """Copy with explicit prefixes of length >= horizon at every vertex."""
        stacks = []
        for v in range(self.n):
            out_index = {e: i for i, e in enumerate(self.out_edges[v])}
            stacks.append([out_index[self.element(v, k)] for k in range(horizon)])
        return SmallGraph(self.n, self.edges, stacks)

    def to_text(self):
        lines = [f"{s} {t}" for s, t in self.edges]
        for v, st in enumerate(self.stacks):
            lines.append("stack " + str(v) + ": " + " ".join(map(str, st)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        edges, stacks = [], {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("stack"):
                head, _, body = line.partition(":")
                v = int(head.split()[1])
                stacks[v] = [int(t) for t in body.split()]
            else:
                s, t = line.split()
                edges.append((int(s), int(t)))
        n = 1 + max(max(s, t) for s, t in edges)
        return cls(n, edges, [stacks.get(v, []) for v in range(n)])


def graph_fire(g, sigma, u, v):
    u[v] += 1
    e = g.element(v, u[v])
    sigma[v] -= 1
    sigma[g.edges[e][1]] += 1


def graph_oracle(g, sigma0, max_steps=10 ** 7):
    """Odometer, final chips and final tops of the growth process on a
    small graph (one firing at a time)."""
    sigma = list(sigma0)
    if sum(sigma) > g.n:
        raise ValueError("more chips than vertices never stabilizes")
    u = [0] * g.n
    queue = deque(v for v in range(g.n) if sigma[v] > 1)
    steps = 0
    while queue:
        v = queue.popleft()
        while sigma[v] > 1:
            graph_fire(g, sigma, u, v)
            steps += 1
            if steps > max_steps:
                raise RuntimeError("firing did not stabilize within the step cap")
            t = g.edges[g.element(v, u[v])][1]
            if t != v and sigma[t] > 1:
                queue.append(t)
    tops = [g.element(v, u[v]) for v in range(g.n)]
    return u, sigma, tops


def graph_laplacian(g, u):
    delta = [-u[v] for v in range(g.n)]
    for e, (s, t) in enumerate(g.edges):
        delta[t] += g.count(e, u[s])
    return delta


def check_exchangeability(g, sigma0, perms):
    """Permuting stack elements 1..u(v)-1 at each vertex (keeping element
    u(v) fixed) must not change the odometer.  ``perms[v]`` is a permutation
    of range(u[v]-1) applied to those elements; returns True when the
    odometers agree."""
    u, _, _ = graph_oracle(g, sigma0)
    horizon = max(u) + 2 * g.n + 2
    gm = g.materialized(horizon)
    stacks = [list(st) for st in gm.stacks]
    for v, pi in enumerate(perms):
        block = stacks[v][1:u[v]]
        assert sorted(pi) == list(range(len(block))), "not a permutation of 1..u-1"
        stacks[v][1:u[v]] = [block[i] for i in pi]
    g2 = SmallGraph(g.n, g.edges, stacks)
    u2, _, _ = graph_oracle(g2, sigma0)
    return u2 == u


def check_cycle_removal(g, sigma0, pairs):
    """Deleting stack elements that form a directed cycle (at indices below
    each site's final odometer) must lower the odometer by the per-site
    visit counts and leave final chips and tops unchanged."""
    u, sigma, tops = graph_oracle(g, sigma0)
    if len(set(pairs)) != len(pairs):
        raise ValueError("pairs must be distinct")
    edge_cycle = []
    for v, k in pairs:
        if not 1 <= k <= u[v] - 1:
            raise ValueError("cycle indices must lie below the odometer")
        edge_cycle.append(g.element(v, k))
    targets = sorted(g.edges[e][1] for e in edge_cycle)
    sources = sorted(g.edges[e][0] for e in edge_cycle)
    if targets != sources:
        raise ValueError("chosen rotors do not form a directed cycle")
    horizon = max(u) + 2 * g.n + 2
    gm = g.materialized(horizon)
    stacks = []
    chi = [0] * g.n
    removed = {}
    for v, k in pairs:
        chi[v] += 1
        removed.setdefault(v, set()).add(k)
    for v in range(g.n):
        drop = removed.get(v, set())
        stacks.append([s for k, s in enumerate(gm.stacks[v]) if k not in drop])
    g2 = SmallGraph(g.n, g.edges, stacks)
    u2, sigma2, tops2 = graph_oracle(g2, sigma0)
    expected_u = [u[v] - chi[v] for v in range(g.n)]
    return u2 == expected_u and sigma2 == sigma and tops2 == tops
