import csv
import json
import os

import numpy as np
import pytest

from stackgrowth import cli, render, snapshots, solver, stacks
from stackgrowth.lattice import Field

from conftest import KEY0

KEY_HEX = "00" * 32


def read_ppm(path):
    with open(path, "rb") as fh:
        assert fh.read(3) == b"P6\n"
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        assert fh.readline().strip() == b"255"
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(h, w, 3)


def test_simulate_rotor_end_to_end(tmp_path):
    out = str(tmp_path)
    rc = cli.main(["simulate", "--model", "rotor", "--n", "1024",
                   "--seq", "WNES", "--verify", "--out", out])
    assert rc == 0
    snap = os.path.join(out, "rotor_n1024_WNES.snap")
    manifest = json.load(open(os.path.join(out, "rotor_n1024_WNES.manifest.json")))
    assert manifest["n"] == 1024 and manifest["seq"] == "WNES"
    sigma, u, top = snapshots.load_snapshot(snap)
    assert sigma.total() == 1024
    with open(os.path.join(out, "stats.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert float(rows[0]["diff"]) == pytest.approx(1.324, abs=1e-3)
    assert rows[0]["highest_hill"] == "3" and rows[0]["deepest_hole"] == "-1"


def test_simulate_validation_exit_codes(tmp_path):
    assert cli.main(["simulate", "--model", "rotor", "--n", "0",
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["simulate", "--model", "idla", "--n", "4",
                     "--key", "zz", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--model", "nosuch", "--n", "4"])
    assert exc.value.code == 2


def test_simulate_oracle_produces_identical_cluster(tmp_path):
    fast = tmp_path / "fast"
    slow = tmp_path / "slow"
    args = ["simulate", "--model", "idla", "--n", "1024", "--key", KEY_HEX,
            "--run", "1"]
    assert cli.main(args + ["--out", str(fast)]) == 0
    assert cli.main(args + ["--oracle", "--out", str(slow)]) == 0
    a = (fast / "idla_n1024_r1.snap").read_bytes()
    b = (slow / "idla_n1024_r1.snap").read_bytes()
    assert a == b


def test_simulate_reruns_bit_identical(tmp_path):
    one = tmp_path / "one"
    two = tmp_path / "two"
    args = ["simulate", "--model", "lds", "--n", "512", "--key", KEY_HEX,
            "--run", "3"]
    assert cli.main(args + ["--out", str(one)]) == 0
    assert cli.main(args + ["--out", str(two)]) == 0
    assert (one / "lds_n512_r3.snap").read_bytes() \
        == (two / "lds_n512_r3.snap").read_bytes()
    rows = []
    for d in (one, two):
        with open(d / "stats.csv") as fh:
            rows.append(list(csv.DictReader(fh))[0])
    for col in rows[0]:
        if col != "runtime_ms":
            assert rows[0][col] == rows[1][col]


def test_render_modes(tmp_path):
    out = str(tmp_path)
    assert cli.main(["simulate", "--model", "rotor", "--n", "256",
                     "--seq", "WNES", "--out", out,
                     "--render", "rotors"]) == 0
    snap = os.path.join(out, "rotor_n256_WNES.snap")
    for mode in ("rotors", "chips", "odo-diff"):
        assert cli.main(["render", snap, "--mode", mode,
                         "--out", os.path.join(out, mode + ".ppm")]) == 0
    img = read_ppm(os.path.join(out, "rotors.ppm"))
    # every pixel is one of the four rotor colors or background
    palette = {tuple(c) for c in render.ROTOR_COLORS} | {(255, 255, 255)}
    seen = {tuple(p) for p in img.reshape(-1, 3)}
    assert seen <= palette
    assert len(seen & {tuple(c) for c in render.ROTOR_COLORS}) == 4
    chips = read_ppm(os.path.join(out, "chips.ppm"))
    seen = {tuple(p) for p in chips.reshape(-1, 3)}
    # final chips are zeros and ones only
    assert seen <= {(255, 255, 255), (0, 0, 0)}


def test_render_missing_snapshot(tmp_path):
    assert cli.main(["render", str(tmp_path / "nope.snap")]) == 2


def test_render_single_chip(tmp_path):
    res = solver.solve(stacks.PeriodicStack("WNES"), 1)
    img = render.render_chips(res.sigma)
    black = (img == (0, 0, 0)).all(axis=2).sum()
    assert black == 1


def test_chip_colors_after_phase1():
    # intermediate chip fields stay within the five-color range
    from stackgrowth.potential import approx_odometer
    from stackgrowth.solver import phase1_apply
    n = 10 ** 4
    ap = approx_odometer(n)
    s0 = Field(ap.u.half_width)
    s0[(0, 0)] = n
    st = phase1_apply(ap.u, s0, stacks.PeriodicStack("WNES"))
    img = render.render_chips(st.sigma)
    seen = {tuple(p) for p in img.reshape(-1, 3)}
    allowed = set(map(tuple, render.CHIP_COLORS.values()))
    assert seen <= allowed  # nothing below -1 or above 3


def test_sweep_cli_and_figure(tmp_path):
    out = str(tmp_path)
    rc = cli.main(["sweep", "--model", "lds", "--n-list", "64,128,256",
                   "--trials", "3", "--jobs", "1", "--key", KEY_HEX,
                   "--out", out])
    assert rc == 0
    with open(os.path.join(out, "stats.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    with open(os.path.join(out, "table.csv")) as fh:
        table = list(csv.DictReader(fh))
    assert [int(r["n"]) for r in table] == [64, 128, 256]
    assert all(r["trials"] == "3" for r in table)
    assert os.path.exists(os.path.join(out, "diff_vs_n.png"))


def test_sweep_aggregation_matches_rows(tmp_path):
    rows, table, _ = cli.sweep("lds", [128], 4, key_hex=KEY_HEX, jobs=1)
    diffs = [float(r["diff"]) for r in rows]
    assert table[0]["diff_mean"] == pytest.approx(np.mean(diffs))
    assert table[0]["diff_sd"] == pytest.approx(np.std(diffs))


def test_sweep_moments_csv(tmp_path):
    out = str(tmp_path)
    rc = cli.main(["sweep", "--model", "idla", "--n-list", "256",
                   "--trials", "2", "--jobs", "1", "--key", KEY_HEX,
                   "--moments", "3", "--out", out])
    assert rc == 0
    with open(os.path.join(out, "moments.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert {r["m"] for r in rows} == {"1", "2", "3"}


def test_kernel_dump_cli(tmp_path):
    out = os.path.join(str(tmp_path), "kernel.csv")
    assert cli.main(["kernel", "--out", out]) == 0
    assert open(out).readline().startswith("x,y,")


def test_snapshot_roundtrip(tmp_path):
    res = solver.solve(stacks.IdlaStack(KEY0, 9), 300)
    path = str(tmp_path / "c.snap")
    snapshots.save_snapshot(path, res.sigma, res.u, res.top)
    sigma, u, top = snapshots.load_snapshot(path)
    assert sigma.equals(res.sigma) and u.equals(res.u) and top.equals(res.top)
