"""Command-line entry point.

Commands: run (single simulation), sweep (load sweep over a population
variable), converge (weight-adaptation traces for several delay targets),
verify (allocator oracle and condition checks), calibrate (streaming rate
distribution scale). Exit codes: 0 success, 1 runtime failure, 2 config
error, 3 verification failure.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import io as simio
from .scheduler import (
    SchedulerInput,
    allocate_with_weight,
    check_optimality_conditions,
)
from .sim import desk_config, run_simulation
from .traffic import calibrate_streaming_beta

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3


def _add_common(p):
    p.add_argument("--config", help="INI config file (desk-scale defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the config RNG seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--slots", type=int, help="override the slot count")
    p.add_argument("--runs", type=int, help="override the number of runs")
    p.add_argument("--plots", action="store_true", help="also render PNG figures")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ofdmasim",
        description="Single-cell OFDMA downlink scheduling simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation and write a summary CSV")
    _add_common(p)
    p.add_argument("--scheduler", choices=("adaptive", "sequential"),
                   help="override the scheduling scheme")
    p.add_argument("--trace", action="store_true",
                   help="also write the per-slot weight/delay trace CSV")

    p = sub.add_parser("sweep", help="sweep a population variable for both schemes")
    _add_common(p)

    p = sub.add_parser("converge", help="weight adaptation traces per delay target")
    _add_common(p)
    p.add_argument("--d-max", default="0.2,0.3,0.5",
                   help="comma-separated delay targets in seconds")

    p = sub.add_parser("verify", help="allocator optimality and condition checks")
    p.add_argument("--users", type=int, default=4, help="max users per instance (<=4)")
    p.add_argument("--subcarriers", type=int, default=6,
                   help="max subcarriers per instance (<=6)")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("calibrate", help="streaming rate distribution scale")
    p.add_argument("--rate-min", type=float, default=64e3)
    p.add_argument("--rate-max", type=float, default=256e3)
    p.add_argument("--rate-mean", type=float, default=180e3)
    return parser


def _load(args, need_spec=False):
    if args.config:
        loaded = simio.load_config(args.config)
    else:
        loaded = desk_config()
    if isinstance(loaded, simio.ExperimentSpec):
        spec, cfg = loaded, loaded.base
    else:
        spec, cfg = None, loaded
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.slots is not None:
        overrides["num_slots"] = args.slots
    if args.runs is not None:
        overrides["num_runs"] = args.runs
    if overrides:
        cfg = replace(cfg, **overrides)
    if spec is not None:
        spec.base = cfg
    elif need_spec:
        spec = simio.ExperimentSpec(base=cfg, variable="streaming_users",
                                    values=list(range(4, 21, 2)),
                                    schedulers=["adaptive", "sequential"])
    return cfg, spec


def cmd_run(args):
    cfg, _ = _load(args)
    if args.scheduler:
        cfg = replace(cfg, scheduler=args.scheduler)
    os.makedirs(args.out, exist_ok=True)
    simio.write_resolved_config(cfg, os.path.join(args.out, "resolved.cfg"))
    metrics = run_simulation(cfg)
    simio.write_run_csv(metrics, cfg.scheduler, os.path.join(args.out, "run.csv"))
    if args.trace:
        simio.write_lambda_trace(metrics.weight_trace, metrics.ewma_trace,
                                 os.path.join(args.out, "trace.csv"))
    print(f"scheduler={cfg.scheduler} voip_delay={metrics.voip_delay_s:.6g}s "
          f"str_delay={metrics.streaming_delay_s:.6g}s "
          f"be_throughput={metrics.be_throughput_bps:.6g}bit/s "
          f"voip_drop={metrics.voip_drop_rate:.4g} "
          f"str_drop={metrics.streaming_drop_rate:.4g}")
    return EXIT_OK


def cmd_sweep(args):
    cfg, spec = _load(args, need_spec=True)
    os.makedirs(args.out, exist_ok=True)
    simio.write_resolved_config(spec.base, os.path.join(args.out, "resolved.cfg"),
                                sweep=spec)
    rows = []
    for value in spec.values:
        for scheduler in spec.schedulers:
            metrics = run_simulation(spec.config_for(value, scheduler))
            rows.append((value, scheduler, metrics))
            print(f"{spec.variable}={value} {scheduler}: "
                  f"voip_delay={metrics.voip_delay_s:.6g}s "
                  f"str_delay={metrics.streaming_delay_s:.6g}s "
                  f"be={metrics.be_throughput_bps:.6g}bit/s")
    simio.write_sweep_csv(rows, os.path.join(args.out, "sweep.csv"))

    ctrl = spec.base.controller
    threshold = ctrl.target_delay_s * (1.0 + ctrl.delay_slack)
    knee = None
    for value, scheduler, metrics in rows:
        if scheduler == "adaptive" and metrics.steady_ewma_delay_s > threshold:
            knee = value
            break
    if knee is None:
        print("turning point: none detected within the sweep")
    else:
        print(f"turning point: {spec.variable}={knee} "
              f"(monitored delay exceeded {threshold:.3g}s)")
    if args.plots:
        simio.plot_sweep(rows, args.out)
    return EXIT_OK


def cmd_converge(args):
    cfg, _ = _load(args)
    try:
        targets = [float(v) for v in args.d_max.split(",") if v.strip()]
    except ValueError as exc:
        raise simio.ConfigError(f"--d-max: {exc}") from exc
    if not targets:
        raise simio.ConfigError("--d-max needs at least one value")
    os.makedirs(args.out, exist_ok=True)
    traces = {}
    for target in targets:
        case_cfg = replace(
            cfg, scheduler="adaptive",
            controller=replace(cfg.controller, target_delay_s=target),
        )
        metrics = run_simulation(case_cfg)
        label = f"dmax{target:g}"
        path = os.path.join(args.out, f"trace_{label}.csv")
        simio.write_lambda_trace(metrics.weight_trace, metrics.ewma_trace, path,
                                 normalize=True)
        traces[label] = metrics.weight_trace
        conv = metrics.convergence_slot
        print(f"d_max={target:g}s: convergence_slot="
              f"{'none' if conv is None else conv} "
              f"steady_delay={metrics.steady_ewma_delay_s:.6g}s -> {path}")
    if args.plots:
        simio.plot_traces(traces, args.out)
    return EXIT_OK


def random_instance(rng, max_users, max_subcarriers):
    """Small random scheduling instance for the oracle checks."""
    n = int(rng.integers(2, max_users + 1))
    k = int(rng.integers(1, max_subcarriers + 1))
    n_qos = int(rng.integers(1, n))
    is_qos = np.zeros(n, dtype=bool)
    is_qos[:n_qos] = True
    priority = np.where(is_qos, rng.uniform(1e-6, 10.0, n), 0.0)
    rates = rng.uniform(0.0, 1e6, (n, k))
    backlog = np.where(is_qos, rng.uniform(1.0, 1e9, n), 0.0)
    inp = SchedulerInput(rates_bps=rates, is_qos=is_qos, priority=priority,
                         backlog_bits=backlog, slot_s=1.0)
    weight = float(rng.uniform(0.0, 10.0))
    return inp, weight


def exhaustive_best_assignment(inp, be_weight):
    """Enumerate every subcarrier-to-user assignment; ties resolve to the
    lexicographically smallest owner vector. Independent check path."""
    n, k = inp.rates_bps.shape
    eligible = np.nonzero(inp.eligible())[0]
    grids = np.meshgrid(*([eligible] * k), indexing="ij")
    assignments = np.stack([g.ravel() for g in grids], axis=1)  # (m, k)
    per_user_weight = np.where(inp.is_qos, inp.priority, be_weight)
    cols = np.arange(k)
    scores = (per_user_weight[assignments]
              * inp.rates_bps[assignments, cols[None, :]]).sum(axis=1)
    best = scores.max()
    candidates = assignments[scores >= best - 1e-9 * max(1.0, abs(best))]
    exact = candidates[(per_user_weight[candidates]
                        * inp.rates_bps[candidates, cols[None, :]]).sum(axis=1) == best]
    pool = exact if exact.size else candidates
    order = np.lexsort(pool.T[::-1])
    return pool[order[0]], float(best)


def cmd_verify(args):
    if args.users > 4 or args.subcarriers > 6:
        print("verify: caps exceed exhaustive-search limits (users<=4, subcarriers<=6)",
              file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.default_rng(args.seed)
    for trial in range(args.trials):
        inp, weight = random_instance(rng, args.users, args.subcarriers)
        alloc = allocate_with_weight(inp, weight)
        _, best = exhaustive_best_assignment(inp, weight)
        tol = 1e-9 * max(1.0, abs(best))
        if abs(alloc.objective_value - best) > tol:
            print(f"verify FAILED at trial {trial}: objective "
                  f"{alloc.objective_value!r} != exhaustive {best!r}")
            print(f"rates={inp.rates_bps!r} priority={inp.priority!r} "
                  f"is_qos={inp.is_qos!r} weight={weight!r}")
            return EXIT_VERIFY
        violations = check_optimality_conditions(alloc, inp, weight)
        if violations:
            print(f"verify FAILED at trial {trial}: condition violations {violations}")
            print(f"rates={inp.rates_bps!r} priority={inp.priority!r} "
                  f"is_qos={inp.is_qos!r} weight={weight!r}")
            return EXIT_VERIFY
    print(f"verify: {args.trials} random instances, 0 violations")
    return EXIT_OK


def cmd_calibrate(args):
    beta, anchor = calibrate_streaming_beta(args.rate_min, args.rate_max,
                                            args.rate_mean)
    print(f"beta={beta!r} anchor={anchor} "
          f"(range [{args.rate_min:g}, {args.rate_max:g}] bit/s, "
          f"mean {args.rate_mean:g} bit/s)")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "converge": cmd_converge,
                "verify": cmd_verify, "calibrate": cmd_calibrate}
    try:
        return handlers[args.command](args)
    except simio.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
