"""Command-line surface: single solves, trial sweeps, verification and
image rendering, with manifests for bit-reproducibility.

All randomness flows from the experiment key and run index; re-running a
manifest reproduces the cluster snapshot and statistics byte for byte
(timing fields aside).
"""

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .analysis import (MOMENTS_COLUMNS, STATS_COLUMNS, complex_moments,
                       fit_log, occupied_sites, stats_row)
from .engine import oracle_simulate, verify_odometer
from .lattice import Field
from .potential import approx_odometer, kernel_table
from .render import (render_chips, render_odo_diff, render_rotors,
                     save_moment_figure, save_sweep_figure, write_ppm)
from .snapshots import load_manifest, load_snapshot, save_manifest, save_snapshot
from .solver import MULTISCALE_FACTOR, solve
from .stacks import make_model

DEFAULT_KEY = "00" * 32


def default_lambda(n):
    """Memory/time tradeoff for the random-stack frontier: keep everything
    aggregated up to 4M chips, then start trimming."""
    if n <= 2 ** 22:
        return 0.0
    if n <= 2 ** 23:
        return 2.0
    return 5.0


def _parse_key(text):
    key = bytes.fromhex(text)
    if len(key) != 32:
        raise ValueError("key must be 64 hex characters")
    return key


def _tag(args):
    if args.model == "rotor":
        return f"{args.model}_n{args.n}_{args.seq}"
    return f"{args.model}_n{args.n}_r{args.run}"


def _append_csv(path, columns, rows):
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns)
        if fresh:
            wr.writeheader()
        for row in rows:
            wr.writerow(row)


def _run_one(model_name, n, seq, key_hex, run, lam, factor, crossover,
             oracle=False, m_max=0):
    """Solve (or step-by-step simulate) one cluster; returns result, row,
    moment rows."""
    key = _parse_key(key_hex)
    model = make_model(model_name, seq=seq, key=key, run=run, lam=lam)
    if oracle:
        import time
        t0 = time.perf_counter()
        ap = approx_odometer(n, crossover=crossover)
        if model_name == "idla":
            model.prime(ap.u)
        u, sigma, top = oracle_simulate(model, _point_mass(ap.u.half_width, n))
        from .solver import SolveReport, SolveResult
        rep = SolveReport(n=n, model=model.describe())
        rep.total_ms = (time.perf_counter() - t0) * 1e3
        w = u.half_width
        diff = u.data.copy()
        xs, ys, uv = ap.u.support()
        np.subtract.at(diff, (xs + w, ys + w), uv)
        rep.abs_err = int(np.abs(diff).sum())
        rep.max_err = int(np.abs(diff).max()) if diff.size else 0
        result = SolveResult(u=u, sigma=sigma, top=top, report=rep)
    else:
        result = solve(model, n, factor=factor, crossover=crossover)
    key_id = model.key_id if model_name != "rotor" else ""
    row = stats_row(result, seq=seq if model_name == "rotor" else "",
                    run=run if model_name != "rotor" else 0,
                    key_id=key_id, lam=lam)
    moments = []
    if m_max:
        xs, ys = occupied_sites(result.sigma)
        mm = complex_moments(xs, ys, n, m_max)
        moments = [{"N": n, "a": run, "m": m + 1,
                    "re": f"{mm[m].real:.9e}", "im": f"{mm[m].imag:.9e}"}
                   for m in range(m_max)]
    return result, row, moments


def _point_mass(half_width, n):
    f = Field(half_width)
    f[(0, 0)] = n
    return f


def cmd_simulate(args):
    try:
        if args.n < 1:
            raise ValueError("--n must be at least 1")
        _parse_key(args.key)
        lam = args.lam if args.lam is not None else default_lambda(args.n)
        result, row, _ = _run_one(args.model, args.n, args.seq, args.key,
                                  args.run, lam, args.factor, args.crossover,
                                  oracle=args.oracle)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.verify:
        sigma0 = _point_mass(result.u.half_width, args.n)
        key = _parse_key(args.key)
        model = make_model(args.model, seq=args.seq, key=key, run=args.run,
                           lam=lam)
        if args.model == "idla":
            model.prime(approx_odometer(args.n, crossover=args.crossover).u)
        res = verify_odometer(result.u, sigma0, model)
        if not res.ok:
            print(f"verification FAILED: {res}", file=sys.stderr)
            return 3
        print("verification ok: no hills, no holes, no cycles")

    os.makedirs(args.out, exist_ok=True)
    tag = _tag(args)
    snap_path = os.path.join(args.out, tag + ".snap")
    save_snapshot(snap_path, result.sigma, result.u, result.top)
    manifest = {
        "version": __version__,
        "model": args.model, "n": args.n,
        "seq": args.seq if args.model == "rotor" else None,
        "key": args.key if args.model != "rotor" else None,
        "run": args.run if args.model != "rotor" else None,
        "lambda": lam, "factor": args.factor, "crossover": args.crossover,
        "oracle": bool(args.oracle),
        "snapshot": os.path.basename(snap_path),
        "report": result.report.as_dict(),
    }
    save_manifest(os.path.join(args.out, tag + ".manifest.json"), manifest)
    _append_csv(os.path.join(args.out, "stats.csv"), STATS_COLUMNS, [row])
    if args.render:
        img_path = os.path.join(args.out, f"{tag}_{args.render}.ppm")
        _render_result(args.render, result, args.n, args.crossover, img_path)
        print(f"wrote {img_path}")
    print(f"n={args.n} diff={row['diff']} out={snap_path}")
    return 0


def _render_result(mode, result, n, crossover, path):
    if mode == "rotors":
        write_ppm(path, render_rotors(result.top))
    elif mode == "chips":
        write_ppm(path, render_chips(result.sigma))
    else:
        write_ppm(path, render_odo_diff(result.u,
                                        approx_odometer(n, crossover=crossover).u))


def _sweep_worker(job):
    (model_name, n, seq, key_hex, run, lam, factor, crossover, m_max) = job
    _, row, moments = _run_one(model_name, n, seq, key_hex, run, lam, factor,
                               crossover, m_max=m_max)
    return row, moments


def sweep(model_name, n_list, trials, seq="WNES", key_hex=DEFAULT_KEY,
          lam=None, jobs=None, factor=MULTISCALE_FACTOR, crossover=100,
          m_max=0, out_dir=None, first_run=1):
    """Run ``trials`` independent clusters per size; returns (rows, table,
    moment rows).  Used by both the CLI and the acceptance suite."""
    jobs = jobs or os.cpu_count() or 1
    joblist = []
    for n in n_list:
        lam_n = lam if lam is not None else default_lambda(n)
        for t in range(trials):
            joblist.append((model_name, n, seq, key_hex, first_run + t,
                            lam_n, factor, crossover, m_max))
    rows, moment_rows = [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunk = max(1, len(joblist) // (8 * jobs))
            for row, moments in pool.map(_sweep_worker, joblist, chunksize=chunk):
                rows.append(row)
                moment_rows.extend(moments)
    else:
        for job in joblist:
            row, moments = _sweep_worker(job)
            rows.append(row)
            moment_rows.extend(moments)
    table = []
    for n in n_list:
        sel = [r for r in rows if r["N"] == n]
        diffs = np.array([float(r["diff"]) for r in sel])
        abse = np.array([float(r["abs_err_u1"]) for r in sel])
        maxe = np.array([float(r["max_err_u1"]) for r in sel])
        norm = n ** 1.5 if model_name == "idla" else float(n)
        table.append({
            "n": n, "trials": len(sel),
            "diff_mean": diffs.mean(), "diff_sd": diffs.std(),
            "err1_mean": (abse / norm).mean(), "err1_sd": (abse / norm).std(),
            "maxerr_mean": maxe.mean(), "maxerr_sd": maxe.std(),
        })
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _append_csv(os.path.join(out_dir, "stats.csv"), STATS_COLUMNS, rows)
        tbl_cols = ["n", "trials", "diff_mean", "diff_sd", "err1_mean",
                    "err1_sd", "maxerr_mean", "maxerr_sd"]
        _append_csv(os.path.join(out_dir, "table.csv"), tbl_cols,
                    [{k: (f"{v:.6f}" if isinstance(v, float) else v)
                      for k, v in row.items()} for row in table])
        fit = None
        if len(n_list) >= 3:
            ns = [row["n"] for row in table]
            means = [row["diff_mean"] for row in table]
            transform = "loglog" if model_name == "lds" else "log"
            fit = (transform, fit_log(ns, means, transform))
        save_sweep_figure(os.path.join(out_dir, "diff_vs_n.png"), table,
                          model_name, fit)
        if moment_rows:
            _append_csv(os.path.join(out_dir, "moments.csv"), MOMENTS_COLUMNS,
                        moment_rows)
    return rows, table, moment_rows


def cmd_sweep(args):
    try:
        n_list = [int(t) for t in args.n_list.split(",")]
        if any(n < 1 for n in n_list) or args.trials < 1:
            raise ValueError("sizes and trials must be positive")
        _parse_key(args.key)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows, table, _ = sweep(args.model, n_list, args.trials, seq=args.seq,
                           key_hex=args.key, lam=args.lam, jobs=args.jobs,
                           factor=args.factor, crossover=args.crossover,
                           m_max=args.moments, out_dir=args.out)
    for row in table:
        print(f"N={row['n']:>10} trials={row['trials']:>6} "
              f"diff={row['diff_mean']:.3f}±{row['diff_sd']:.3f} "
              f"err1={row['err1_mean']:.3f}±{row['err1_sd']:.3f} "
              f"maxerr={row['maxerr_mean']:.1f}")
    return 0


def cmd_render(args):
    if not os.path.exists(args.snapshot):
        print(f"error: no snapshot at {args.snapshot}", file=sys.stderr)
        return 2
    try:
        sigma, u, top = load_snapshot(args.snapshot)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out or (os.path.splitext(args.snapshot)[0] + f"_{args.mode}.ppm")
    if args.mode == "rotors":
        write_ppm(out, render_rotors(top))
    elif args.mode == "chips":
        write_ppm(out, render_chips(sigma))
    else:
        manifest_path = os.path.splitext(args.snapshot)[0] + ".manifest.json"
        if not os.path.exists(manifest_path):
            print("error: odo-diff needs the manifest next to the snapshot",
                  file=sys.stderr)
            return 2
        manifest = load_manifest(manifest_path)
        ap = approx_odometer(manifest["n"], crossover=manifest["crossover"])
        write_ppm(out, render_odo_diff(u, ap.u))
    print(f"wrote {out}")
    return 0


def cmd_kernel(args):
    table = kernel_table()
    table.dump_csv(args.out)
    print(f"wrote {args.out}")
    return 0


def _build_parser():
    p = argparse.ArgumentParser(prog="stackgrowth",
                                description="Abelian-stack growth models: "
                                "exact fast simulation and statistics")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="solve one cluster")
    sim.add_argument("--model", choices=["rotor", "idla", "lds"], required=True)
    sim.add_argument("--n", type=int, required=True, help="number of chips")
    sim.add_argument("--seq", default="WNES", help="rotor sequence (periodic)")
    sim.add_argument("--key", default=DEFAULT_KEY, help="64 hex chars")
    sim.add_argument("--run", type=int, default=1, help="run index a")
    sim.add_argument("--lambda", dest="lam", type=float, default=None)
    sim.add_argument("--out", default=".", help="output directory")
    sim.add_argument("--oracle", action="store_true",
                     help="force step-by-step simulation")
    sim.add_argument("--verify", action="store_true",
                     help="check the odometer certificate")
    sim.add_argument("--render", choices=["rotors", "chips", "odo-diff"])
    sim.add_argument("--factor", type=float, default=MULTISCALE_FACTOR)
    sim.add_argument("--crossover", type=int, default=100)
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="run many trials per size")
    sw.add_argument("--model", choices=["rotor", "idla", "lds"], required=True)
    sw.add_argument("--n-list", required=True, help="comma-separated sizes")
    sw.add_argument("--trials", type=int, required=True)
    sw.add_argument("--jobs", type=int, default=None)
    sw.add_argument("--seq", default="WNES")
    sw.add_argument("--key", default=DEFAULT_KEY)
    sw.add_argument("--lambda", dest="lam", type=float, default=None)
    sw.add_argument("--moments", type=int, default=0,
                    help="also record the first m complex moments")
    sw.add_argument("--out", default=".", help="output directory")
    sw.add_argument("--factor", type=float, default=MULTISCALE_FACTOR)
    sw.add_argument("--crossover", type=int, default=100)
    sw.set_defaults(func=cmd_sweep)

    rd = sub.add_parser("render", help="draw a stored cluster snapshot")
    rd.add_argument("snapshot")
    rd.add_argument("--mode", choices=["rotors", "chips", "odo-diff"],
                    default="rotors")
    rd.add_argument("--out", default=None)
    rd.set_defaults(func=cmd_render)

    kr = sub.add_parser("kernel", help="dump the exact kernel table as CSV")
    kr.add_argument("--out", default="kernel.csv")
    kr.set_defaults(func=cmd_kernel)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    out_env = os.environ.get("STACKGROWTH_OUT")
    if out_env and getattr(args, "out", None) in (".", None) \
            and args.command in ("simulate", "sweep"):
        args.out = out_env
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
