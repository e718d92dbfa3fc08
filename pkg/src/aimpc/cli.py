"""Command-line front end.

    aimpc run CONFIG --mode aimpc --out DIR
    aimpc compare CONFIG --modes cv,ca,aimpc --out DIR
    aimpc impute-bench --nature 0,1,0 --windows 5 --out DIR

Exit codes: 0 on completion (a failed merge is a result, not an error),
2 for bad configuration or arguments, 3 when a solver gives up.
"""

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import output
from .config import ConfigError, load_scenario
from .harness import MODES, SimulationError, compute_metrics, imputation_benchmark, run_scenario, with_mode
from .neighbor import NvMpcConfig, NvTrueWeights
from .qp import NonConvexError

log = logging.getLogger("aimpc")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class UsageError(ValueError):
    pass


def _write_run(out_dir, run_log, metrics, timing):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "trajectory.csv")
    output.atomic_write(csv_path, output.trajectory_csv(run_log))
    output.atomic_write(os.path.join(out_dir, "metrics.json"),
                        output.dumps(output.metrics_dict(metrics, timing)))
    output.plots_from_csv(csv_path, out_dir)


def cmd_run(args):
    if args.seed is not None:
        log.info("--seed %s ignored: the simulation is deterministic", args.seed)
    sc = load_scenario(args.config, args.mode)
    free = run_scenario(sc, ego_present=False)
    run_log = run_scenario(sc)
    metrics = compute_metrics(run_log, free)
    _write_run(args.out, run_log, metrics, args.timing)
    print(f"{sc.name} {sc.mode}: {metrics.merge_outcome}")
    return EXIT_OK


def _modes(text):
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode {bad[0]!r}; choose from {', '.join(MODES)}")
    if len(set(modes)) < 2:
        raise UsageError("compare needs at least two distinct modes")
    return list(dict.fromkeys(modes))


def orderings(per_mode):
    """Ascending orderings and pairwise ``a<b`` flags for hindrance and jerk."""
    out, pairs = {}, {}
    for key in ("hindrance_pct", "rms_jerk"):
        vals = {m: d[key] for m, d in per_mode.items() if d[key] is not None}
        out[key] = sorted(vals, key=lambda m: (vals[m], m))
        pairs[key] = {f"{a}<{b}": vals[a] < vals[b]
                      for a in vals for b in vals if a != b}
    return out, pairs


def cmd_compare(args):
    modes = _modes(args.modes)
    sc = load_scenario(args.config)
    free = run_scenario(sc, ego_present=False)
    per_mode = {}
    for mode in modes:
        run_log = run_scenario(with_mode(sc, mode))
        metrics = compute_metrics(run_log, free)
        _write_run(os.path.join(args.out, mode), run_log, metrics, args.timing)
        per_mode[mode] = output.metrics_dict(metrics, args.timing)
        print(f"{sc.name} {mode}: {metrics.merge_outcome}")
    order, pairs = orderings(per_mode)
    doc = {"scenario": sc.name, "modes": per_mode, "ordering": order, "pairwise": pairs}
    output.atomic_write(os.path.join(args.out, "comparison.json"), output.dumps(doc))
    return EXIT_OK


def _nature(text):
    try:
        q = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"--nature: {exc}") from exc
    if q.size != 3 or not np.all(np.isfinite(q)) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise UsageError(f"--nature must be three non-negative numbers summing to 1, got {text!r}")
    return q


def cmd_impute_bench(args):
    q = _nature(args.nature)
    if args.windows < 1:
        raise UsageError("--windows must be positive")
    states, imputer = imputation_benchmark(NvTrueWeights(*q), args.windows, r=args.r,
                                           v0=args.v0, a0=args.a0, v_ref=args.v_ref)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("window", "t", "alpha_s", "alpha_v", "alpha_a", "residual", "linf_error"))
    errors = []
    for i, res in enumerate(imputer.history_):
        a = res.alpha.as_array()
        err = float(np.max(np.abs(a - q)))
        errors.append(err)
        w.writerow([str(i + 1), output.fmt((i + args.r) * NvMpcConfig().Ts)] +
                   [output.fmt(x) for x in (*a, res.residual_norm, err)])
    os.makedirs(args.out, exist_ok=True)
    output.atomic_write(os.path.join(args.out, "alpha.csv"), buf.getvalue())
    final = imputer.predict()
    summary = {
        "nature": [float(x) for x in q],
        "windows": int(args.windows),
        "final_alpha": [float(output.fmt(x)) for x in final],
        "linf_error": float(output.fmt(errors[-1])),
        "tolerance": args.tol,
        "converged": bool(errors[-1] <= args.tol),
    }
    output.atomic_write(os.path.join(args.out, "summary.json"), output.dumps(summary))
    print(f"final alpha {np.round(final, 3).tolist()}, L-inf error {errors[-1]:.3f}"
          + ("" if summary["converged"] else " (not converged)"))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="aimpc", description="Interaction-aware merge planning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log config defaults and progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario in one planner mode")
    r.add_argument("config")
    r.add_argument("--mode", choices=MODES, default=None, help="overrides [scenario] mode")
    r.add_argument("--out", default="out")
    r.add_argument("--seed", type=int, default=None, help="accepted for harness use; ignored")
    r.add_argument("--timing", action="store_true", help="record solve times (breaks byte-identical output)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several modes against one ego-free reference")
    c.add_argument("config")
    c.add_argument("--modes", default="cv,ca,aimpc")
    c.add_argument("--out", default="out")
    c.add_argument("--timing", action="store_true")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("impute-bench", help="weight recovery for an NV driving alone")
    b.add_argument("--nature", required=True, help="q_s,q_v,q_a on the simplex")
    b.add_argument("--windows", type=int, default=5)
    b.add_argument("--r", type=int, default=3, help="window length in steps")
    b.add_argument("--v0", type=float, default=8.0)
    b.add_argument("--a0", type=float, default=1.0)
    b.add_argument("--v-ref", dest="v_ref", type=float, default=14.0)
    b.add_argument("--tol", type=float, default=0.15, help="L-inf error counted as converged")
    b.add_argument("--out", default="out")
    b.set_defaults(func=cmd_impute_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, NonConvexError, np.linalg.LinAlgError) as exc:
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
