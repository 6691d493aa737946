import numpy as np
import pytest

from stackgrowth import analysis, engine, solver, stacks
from stackgrowth.engine import oracle_simulate, verify_odometer
from stackgrowth.lattice import Field
from stackgrowth.potential import approx_odometer
from stackgrowth.solver import (phase1_apply, phase2_annihilate,
                                phase3_pop_cycles, solve)

from conftest import KEY, KEY0


def point_mass(w, n):
    f = Field(w)
    f[(0, 0)] = n
    return f


def test_single_chip():
    res = solve(stacks.PeriodicStack("WNES"), 1)
    assert res.u.total() == 0
    assert res.sigma.total() == 1 and res.sigma[(0, 0)] == 1


def test_phase1_with_exact_odometer_is_fixed_point():
    n = 300
    m = stacks.PeriodicStack("WNES")
    s0 = point_mass(8, n)
    u_true, sigma_true, _ = oracle_simulate(m, s0)
    st = phase1_apply(u_true, s0, m)
    assert st.sigma.data.max() <= 1
    assert not ((st.sigma.data < 0)
                | ((st.sigma.data == 0) & (st.u.data > 0))).any()
    before_u = st.u.copy()
    phase2_annihilate(st)
    assert st.u.equals(before_u)  # nothing to repair
    assert st.sigma.equals(sigma_true)


def test_zero_estimate_reduces_to_growth():
    n = 400
    m = stacks.PeriodicStack("WNES")
    res = solve(m, n, u1=Field(8))
    s0 = point_mass(8, n)
    u_o, sigma_o, top_o = oracle_simulate(stacks.PeriodicStack("WNES"), s0)
    assert res.u.equals(u_o) and res.sigma.equals(sigma_o)
    assert res.top.equals(top_o)


def test_hand_instance_hill_and_hole():
    # a surplus next to a deficit inside a settled 5x5 patch is repaired
    # with changes confined to the chips moved along the stacks
    m = stacks.PeriodicStack("WNES")
    sigma = Field(8)
    u = Field(8)
    for x in range(-2, 3):
        for y in range(-2, 3):
            sigma[(x, y)] = 1
            u[(x, y)] = 4
    sigma[(0, 0)] = 2   # hill
    sigma[(1, 0)] = 0   # hole (u > 0 there)
    st = solver.SolveState(sigma=sigma, u=u, model=m, u1=u.copy(),
                           report=solver.SolveReport(n=sigma.total(),
                                                     model=m.describe()))
    phase2_annihilate(st)
    assert st.sigma.data.max() <= 1 and st.sigma.data.min() >= 0
    assert not ((st.sigma.data == 0) & (st.u.data > 0)).any()


def test_phase2_postconditions_and_conservation():
    for model in (stacks.PeriodicStack("WENS"), stacks.IdlaStack(KEY, 21),
                  stacks.LowDiscrepancyStack(KEY, 21)):
        n = 2 ** 10
        res = solve(model, n)
        assert res.sigma.total() == n
        assert res.sigma.data.max() <= 1 and res.sigma.data.min() >= 0
        assert res.u.data.min() >= 0


def test_phase2_sweep_order_invariance():
    # different multiscale factors change the work order but not the output
    n = 2 ** 12
    outs = []
    for factor in (1.5, 1.9, 3.0):
        res = solve(stacks.PeriodicStack("WNES"), n, factor=factor)
        outs.append(res)
    for other in outs[1:]:
        assert outs[0].u.equals(other.u)
        assert outs[0].sigma.equals(other.sigma)
        assert outs[0].top.equals(other.top)


def test_phase2_cap_fallback_same_output():
    n = 2 ** 10
    base = solve(stacks.IdlaStack(KEY, 22), n)
    tiny = solve(stacks.IdlaStack(KEY, 22), n, op_cap=500)
    assert tiny.report.fallback
    assert base.u.equals(tiny.u) and base.sigma.equals(tiny.sigma)
    assert base.top.equals(tiny.top)


def test_phase2_dominates_oracle_odometer():
    # after annihilation the work done is never below the true odometer
    n = 2 ** 10
    m = stacks.PeriodicStack("WNES")
    ap = approx_odometer(n)
    s0 = point_mass(ap.u.half_width, n)
    st = phase1_apply(ap.u, s0, m)
    phase2_annihilate(st)
    u_true, _, _ = oracle_simulate(stacks.PeriodicStack("WNES"), s0)
    w = min(st.u.half_width, u_true.half_width)
    a = st.u.data[st.u.half_width - w:st.u.half_width + w + 1,
                  st.u.half_width - w:st.u.half_width + w + 1]
    b = u_true.data[u_true.half_width - w:u_true.half_width + w + 1,
                    u_true.half_width - w:u_true.half_width + w + 1]
    assert (a >= b).all()


def test_phase3_two_cycle():
    # two adjacent sites whose tops point at each other pop exactly once
    ps = stacks.PeriodicStack("WNES")
    ua = next(k for k in range(1, 5) if ps.rotor((0, 0), k) == 1)  # E
    ub = next(k for k in range(1, 5) if ps.rotor((1, 0), k) == 3)  # W
    u = Field(4)
    u[(0, 0)] = ua + 4
    u[(1, 0)] = ub + 4
    sigma = Field(4)
    sigma[(0, 0)] = 1
    sigma[(1, 0)] = 1
    st = solver.SolveState(sigma=sigma, u=u.copy(), model=ps, u1=u.copy(),
                           report=solver.SolveReport(n=2, model=ps.describe()))
    phase3_pop_cycles(st)
    assert st.report.pop_unfires >= 2
    assert st.u[(0, 0)] < u[(0, 0)] and st.u[(1, 0)] < u[(1, 0)]
    assert st.sigma[(0, 0)] == 1 and st.sigma[(1, 0)] == 1


def test_phase3_noop_when_acyclic():
    n = 200
    m = stacks.PeriodicStack("WNES")
    s0 = point_mass(8, n)
    u_true, sigma_true, _ = oracle_simulate(m, s0)
    st = solver.SolveState(sigma=sigma_true.copy(), u=u_true.copy(), model=m,
                           u1=u_true.copy(),
                           report=solver.SolveReport(n=n, model=m.describe()))
    phase3_pop_cycles(st)
    assert st.report.pop_unfires == 0
    assert st.u.equals(u_true)


@pytest.mark.parametrize("seq", ["WNES", "WNSE", "WENS"])
def test_solve_equals_oracle_periodic(seq):
    for n in (2 ** 8, 2 ** 10):
        res = solve(stacks.PeriodicStack(seq), n)
        s0 = point_mass(res.u.half_width, n)
        u_o, s_o, t_o = oracle_simulate(stacks.PeriodicStack(seq), s0)
        assert res.u.equals(u_o) and res.sigma.equals(s_o) and res.top.equals(t_o)


def test_solve_equals_oracle_random_models():
    n = 2 ** 8
    ap = approx_odometer(n)
    s0 = point_mass(ap.u.half_width, n)
    m1 = stacks.IdlaStack(KEY, 23)
    m1.prime(ap.u)
    res = solve(m1, n)
    m2 = stacks.IdlaStack(KEY, 23)
    m2.prime(ap.u)
    u_o, s_o, t_o = oracle_simulate(m2, s0)
    assert res.u.equals(u_o) and res.sigma.equals(s_o) and res.top.equals(t_o)

    res = solve(stacks.LowDiscrepancyStack(KEY, 23), n)
    u_o, s_o, t_o = oracle_simulate(stacks.LowDiscrepancyStack(KEY, 23), s0)
    assert res.u.equals(u_o) and res.sigma.equals(s_o) and res.top.equals(t_o)


def test_solve_passes_certificate():
    for model in (stacks.PeriodicStack("WNSE"), stacks.IdlaStack(KEY, 24),
                  stacks.LowDiscrepancyStack(KEY, 24)):
        res = solve(model, 2 ** 9, verify=True)
        assert res.report.total_ms > 0


def test_report_phase1_extremes():
    res = solve(stacks.PeriodicStack("WNES"), 2 ** 10)
    assert res.report.highest_hill == 3
    assert res.report.deepest_hole == -1


def test_occupied_cluster_contains_fired_set():
    res = solve(stacks.IdlaStack(KEY, 25), 2 ** 9)
    w = res.u.half_width
    fired = res.u.data > 0
    occ = res.sigma.data == 1
    assert (occ | ~fired).all()


def test_solve_rejects_bad_n():
    with pytest.raises(ValueError):
        solve(stacks.PeriodicStack("WNES"), 0)
