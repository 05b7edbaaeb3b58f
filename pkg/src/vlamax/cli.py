"""Command-line entry points.

Subcommands:
    simulate   rigid-charge run from a config, writing snapshots
    meanfield  build (or reuse) a reference ensemble cache
    paired     one paired micro/mean-field run, row printed as JSON
    sweep      full N x seed sweep with CSV + summary JSON
    metrics    transport metrics between two snapshot files
    fields     lattice field export with the component breakdown
    check      fast invariant battery
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _add_config_arg(p):
    p.add_argument("--config", default=None, help="INI config file (sections per module)")
    p.add_argument("--out", default=None, help="output directory override")


def _load(args, **overrides):
    from .harness import load_config

    cfg = load_config(args.config, overrides=overrides or None)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    os.makedirs(cfg.output_dir, exist_ok=True)
    if not os.environ.get("VLAMAX_CACHE"):
        os.environ["VLAMAX_CACHE"] = os.path.join(cfg.output_dir, "cache")
    return cfg


def cmd_simulate(args):
    from . import abraham
    from .formfactor import make_standard_profile, rescale
    from .harness import sample_initial, snapshot_state

    cfg = _load(args)
    chi_n = rescale(make_standard_profile(), args.n, cfg.gamma, strict=cfg.strict)
    z0 = sample_initial(cfg.f0(), args.n, args.seed)
    state = abraham.init_micro(
        z0, cfg.f0(), chi_n, field_mode=cfg.field_mode,
        t_max=cfg.t_final + 2 * cfg.dt, include_self=cfg.include_self,
        force_cap=cfg.force_cap,
    )
    n_steps = int(round(cfg.t_final / cfg.dt))
    every = max(1, int(round(args.snapshot_interval / cfg.dt))) if args.snapshot_interval else n_steps
    meta = {"seed": args.seed, "config_hash": cfg.config_hash()}
    for k in range(1, n_steps + 1):
        abraham.step(state, cfg.dt)
        if k % every == 0 or k == n_steps:
            path = os.path.join(cfg.output_dir, f"micro_n{args.n}_s{args.seed}_t{state.t:.4f}.snap")
            snapshot_state(path, state, meta=meta, fmt=args.format)
            print(path)
    print(json.dumps({"t": state.t, "R": abraham.momentum_support(state)}))


def cmd_meanfield(args):
    from .formfactor import make_standard_profile, rescale
    from .meanfield import build_reference, evolve_reference, save_reference

    cfg = _load(args)
    chi_n = rescale(make_standard_profile(), args.n, cfg.gamma, strict=cfg.strict)
    key = f"ref_n{args.n}_m{cfg.m_reference}_dt{cfg.dt:.5f}_T{cfg.t_final}_s{cfg.ref_seed}.npz"
    path = os.path.join(cfg.output_dir, key)
    if os.path.exists(path) and not args.rebuild:
        print(path)
        return
    ens = build_reference(
        cfg.f0(), cfg.m_reference, chi_n, seed=cfg.ref_seed,
        antithetic=cfg.antithetic, field_mode=cfg.field_mode,
        t_max=cfg.t_final + 2 * cfg.dt,
    )
    evolve_reference(ens, cfg.dt, cfg.t_final)
    save_reference(ens, path)
    print(path)


def cmd_paired(args):
    from .harness import run_paired

    cfg = _load(args)
    res = run_paired(cfg, args.n, args.seed, control=args.control)
    print(json.dumps(res.row, indent=2))


def cmd_sweep(args):
    from .harness import sweep

    cfg = _load(args)
    csv_path = os.path.join(cfg.output_dir, f"sweep_{cfg.label}.csv")
    done = []

    def progress(row):
        done.append(row)
        print(f"[{len(done)}] n={row['n']} seed={row['seed']} J_T={row['j_t']:.4f} "
              f"sup_dev={row['sup_dev_pos']:.2e}", file=sys.stderr)

    result = sweep(cfg, csv_path=csv_path, progress=progress)
    summary_path = os.path.join(cfg.output_dir, f"sweep_{cfg.label}.summary.json")
    with open(summary_path, "w") as fh:
        json.dump(result.summary, fh, indent=2)
    print(csv_path)
    print(summary_path)
    print(json.dumps(result.summary, indent=2))


def cmd_metrics(args):
    from .harness import read_snapshot
    from .transport import ChaosMetricConfig, chaos_process_J, wasserstein_p, winf_upper
    from .meanfield import FlowRecord

    a = read_snapshot(args.snapshot_a)
    b = read_snapshot(args.snapshot_b)
    za = np.concatenate([a["x"], a["xi"]], axis=1)
    zb = np.concatenate([b["x"], b["xi"]], axis=1)
    n = za.shape[0]
    cfg_j = ChaosMetricConfig(n, args.delta)
    rec = lambda d: FlowRecord(times=np.array([0.0]), x=d["x"][None], xi=d["xi"][None])
    out = {
        "n": n,
        "W1": wasserstein_p(za, zb, 1.0),
        "W2": wasserstein_p(za, zb, 2.0),
        "Winf_upper": winf_upper(za, zb),
        "dev_pos": float(np.max(np.linalg.norm(a["x"] - b["x"], axis=-1))),
        "dev_mom": float(np.max(np.linalg.norm(a["xi"] - b["xi"], axis=-1))),
        "J": chaos_process_J(rec(a), rec(b), cfg_j, 0.0),
        "delta": args.delta,
        "lambda_n": cfg_j.lambda_n,
    }
    print(json.dumps(out, indent=2))


def cmd_fields(args):
    from . import abraham
    from .fields import write_field_slice_csv
    from .formfactor import make_standard_profile, rescale
    from .harness import LatticeSpec, sample_initial, support_bound

    cfg = _load(args)
    chi_n = rescale(make_standard_profile(), args.n, cfg.gamma, strict=cfg.strict)
    z0 = sample_initial(cfg.f0(), args.n, args.seed)
    state = abraham.init_micro(
        z0, cfg.f0(), chi_n, field_mode=cfg.field_mode,
        t_max=cfg.t_final + 2 * cfg.dt, include_self=cfg.include_self,
    )
    n_steps = int(round(cfg.t_final / cfg.dt))
    abraham.run(state, cfg.dt, n_steps)
    lat = LatticeSpec.for_n(args.n, support_bound(cfg), cfg.n_lat)
    pts = lat.points()
    if args.plane:
        side = lat.points_per_axis
        pts = pts.reshape(side, side, side, 3)[:, :, side // 2, :].reshape(-1, 3)
    bd = state.evaluator.breakdown(state.t, pts, smoothing="single", mode=cfg.field_mode)
    out = args.output or os.path.join(cfg.output_dir, f"fields_n{args.n}_s{args.seed}.csv")
    write_field_slice_csv(out, bd, state.t, pts)
    print(out)


def cmd_check(args):
    ok = True

    def report(name, passed, detail=""):
        nonlocal ok
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")

    rng = np.random.default_rng(0)
    from .kinematics import velocity, velocity_jacobian
    from .retarded import TrajectoryHistory, kernel_alpha0, kernel_grad_alpha0, kernel_k, retarded_time
    from .transport import wasserstein_brute, wasserstein_p

    xi = rng.normal(size=(2000, 3)) * 2.0
    speeds = np.linalg.norm(velocity(xi), axis=-1)
    report("sub-luminal velocity map", bool(np.all(speeds < 1.0)), f"max |v|={speeds.max():.6f}")
    ops = np.linalg.norm(velocity_jacobian(xi), ord=2, axis=(1, 2))
    report("velocity Jacobian bound", bool(np.all(ops <= 2.0)), f"max={ops.max():.3f}")

    worst = 0.0
    for _ in range(25):
        x = rng.normal(size=3)
        x *= rng.uniform(0.3, 3.0) / np.linalg.norm(x)
        t = np.linalg.norm(x)  # kernels are only ever evaluated on the cone
        p = rng.normal(size=3) * 0.7
        m = kernel_grad_alpha0(t, x, p)
        eps = 1e-5
        fd = np.zeros((3, 3))
        for j in range(3):
            dp, dm = p.copy(), p.copy()
            dp[j] += eps
            dm[j] -= eps
            fd[:, j] = (kernel_alpha0(t, x, dp) - kernel_alpha0(t, x, dm)) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(m - fd)) / max(1.0, np.max(np.abs(m)))))
    report("alpha gradient vs finite differences", worst < 1e-7, f"worst={worst:.1e}")

    x = rng.normal(size=3)
    coul = kernel_k(x, np.zeros(3)) - x / np.linalg.norm(x) / (4 * np.pi * np.linalg.norm(x) ** 2)
    report("velocity kernel Coulomb limit", float(np.max(np.abs(coul))) < 1e-15)

    hist = TrajectoryHistory.static_particle(np.zeros(3), t_end=3.0, dt=0.5)
    rp = retarded_time(hist, 2.0, np.array([0.5, 0.0, 0.0]))
    report("static retarded time", abs(rp.t_ret - 1.5) < 1e-12, f"t_ret={rp.t_ret}")

    worst = 0.0
    for _ in range(20):
        n = rng.integers(2, 8)
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        worst = max(worst, abs(wasserstein_p(a, b, 2.0) - wasserstein_brute(a, b, 2.0)))
    report("assignment vs permutation brute force", worst < 1e-12, f"worst={worst:.1e}")

    sys.exit(0 if ok else 1)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="vlamax", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the rigid-charge dynamics")
    _add_config_arg(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snapshot-interval", type=float, default=0.0)
    p.add_argument("--format", choices=("binary", "json"), default="binary")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("meanfield", help="build or reuse a reference ensemble")
    _add_config_arg(p)
    p.add_argument("--n", type=int, default=64, help="particle count fixing the cut-off radius")
    p.add_argument("--rebuild", action="store_true")
    p.set_defaults(fn=cmd_meanfield)

    p = sub.add_parser("paired", help="one paired run; prints the report row")
    _add_config_arg(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--control", action="store_true",
                   help="drive both sides with the reference force (deviation control)")
    p.set_defaults(fn=cmd_paired)

    p = sub.add_parser("sweep", help="full sweep with CSV output")
    _add_config_arg(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("metrics", help="transport metrics between two snapshots")
    p.add_argument("snapshot_a")
    p.add_argument("snapshot_b")
    p.add_argument("--delta", type=float, default=0.1)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("fields", help="lattice field export with breakdown")
    _add_config_arg(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plane", action="store_true", help="export the central z-plane only")
    p.add_argument("--output", default=None)
    p.set_defaults(fn=cmd_fields)

    p = sub.add_parser("check", help="fast invariant battery")
    p.set_defaults(fn=cmd_check)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    main()
