"""Command line entry point: ``rpcbf <command> --config cfg.json --seed 0 --out runs/x``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..value import evaluate
from . import config as cfgmod
from . import io
from .experiments import (gradient_error_study, plant_disturbances, simulate,
                          sweep_filter_boundary, sweep_safe_region, value_setup)


def _parse_state(text: str) -> np.ndarray:
    try:
        return np.array([float(s) for s in text.replace(",", " ").split()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad state {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def cmd_value(setup, args):
    x = args.state
    if x.shape != (setup.system.state_dim,):
        raise SystemExit(f"state needs {setup.system.state_dim} entries, got {x.size}")
    sys_v, cfg_v = value_setup(setup.system, setup.value_config, setup.filter_spec.method)
    est = evaluate(sys_v, cfg_v, x)
    n = len(x)
    row = (*x, est.value, *est.gradient, est.argmax_sample, est.argmax_time)
    path = io.write_csv(args.out / "value.csv",
                        [*io.state_names(n), "value", *(f"grad{i}" for i in range(n)),
                         "argmax_sample", "argmax_time"], [row])
    print(f"value,{est.value!r}")
    print("gradient," + ",".join(repr(float(g)) for g in est.gradient))
    return [path], {"value": est.value}


def cmd_sweep_boundary(setup, args):
    grid = sweep_filter_boundary(setup.sweep_spec(), setup.system, setup.value_config,
                                 setup.filter_spec.hocbf_alphas)
    path = io.write_boundary(args.out / "boundary.csv", grid)
    inside = int(np.sum(grid.values <= 0))
    print(f"cells,{grid.values.size}")
    print(f"inside,{inside}")
    return [path], {"inside": inside, "errors": grid.errors}


def cmd_sweep_safe_region(setup, args):
    ex = setup.config["experiment"]
    grid = sweep_safe_region(setup.sweep_spec(), setup.system, setup.filter_spec,
                             setup.nominal_policy, setup.dt_control, setup.config["seed"],
                             setup.value_config.vertex_weight, bool(ex["only_inside"]))
    path = io.write_safe_region(args.out / "safe_region.csv", grid)
    inside = grid.values <= 0
    summary = {"inside": int(inside.sum()), "safe": int(grid.safe.sum()),
               "inside_unsafe": int((inside & ~grid.safe).sum()), "errors": grid.errors}
    for key in ("inside", "safe", "inside_unsafe"):
        print(f"{key},{summary[key]}")
    return [path], summary


def cmd_grad_study(setup, args):
    ex = setup.config["experiment"]
    rows = gradient_error_study(ex["dt_list"], True, num_v0=int(ex["num_v0"]))
    path = io.write_grad_study(args.out / "grad_study.csv", rows)
    for dt in ex["dt_list"]:
        for method in ("naive", "spline"):
            err = max(r[4] for r in rows if r[0] == float(dt) and r[2] == method)
            print(f"{float(dt)!r},{method},{float(err)!r}")
    return [path], {}


def cmd_simulate(setup, args):
    ex = setup.config["experiment"]
    x0 = np.asarray(ex["x0"], dtype=float) if args.x0 is None else args.x0
    count = int(ex["plant_samples"])
    steps = int(round(float(ex["duration"]) / setup.dt_control))
    D = plant_disturbances(setup.system, steps, count, setup.value_config.vertex_weight,
                           setup.config["seed"])
    paths, safe = [], []
    for i in range(count):
        rec = simulate(setup.system, setup.nominal_policy, setup.filter_spec, x0,
                       float(ex["duration"]), setup.dt_control, disturbance=D[i],
                       seed=setup.config["seed"])
        paths.append(io.write_trajectory(args.out / f"traj_{i}.csv", rec))
        safe.append(rec.safe)
        print(f"traj_{i},{'safe' if rec.safe else 'unsafe'},{rec.status}")
    return paths, {"safe": safe}


COMMANDS = {
    "value": cmd_value,
    "sweep-boundary": cmd_sweep_boundary,
    "sweep-safe-region": cmd_sweep_safe_region,
    "grad-study": cmd_grad_study,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpcbf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "value":
            p.add_argument("state", type=_parse_state, help="comma or space separated state")
        if name == "simulate":
            p.add_argument("--x0", type=_parse_state, default=None, help="initial state override")
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=_u64, default=None, help="master seed (overrides config)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.resolve()
        setup = cfgmod.build(cfg, args.seed)
    except (cfgmod.ConfigError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    paths, summary = COMMANDS[args.command](setup, args)
    manifest = {
        "command": args.command,
        "config": setup.config,
        "seed": setup.config["seed"],
        "version": __version__,
        "outputs": [p.name for p in paths],
        "summary": summary,
    }
    io.write_manifest(args.out / "run.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
