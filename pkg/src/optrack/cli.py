"""Command-line front end.

    optrack track --model dc-motor --dt 0.018 --rho 100 --power 2000 --duration 6 --seed 1 --out run.csv
    optrack sweep --model dc-motor --dt 0.018 --power 2000 --axis rho --grid 20,100,1000 --out rho.csv
    optrack solve --model toy-qp --s 1

Settings are resolved as: built-in defaults < ``--config`` file < flags.
The config file holds ``key = value`` lines; run keys (dt, rho, power, D,
duration, seed, tol) and model keys (see ``optrack.models``) may be mixed.
Exit status: 0 success, 1 solver failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import models
from .problem import PrimalDual
from .sim import (
    BudgetModel,
    DcMotorExperiment,
    ToyQPExperiment,
    UnicycleExperiment,
    initial_solution,
    output_error,
    run_closed_loop,
    run_reference_loop,
)
from .solver import SolverConfig, full_solve

MODELS = ("dc-motor", "unicycles", "toy-qp")
RUN_KEYS = ("dt", "rho", "power", "D", "duration", "seed", "tol")
DEFAULTS = dict(rho=100.0, power=2000.0, D=1, duration=6.0, seed=0, tol=1e-7)
THREADS_ENV = "OPTRACK_THREADS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    model: str
    dt: float
    rho: float = 100.0
    power: float = 2000.0
    D: int = 1
    duration: float = 6.0
    seed: int = 0
    out: Optional[str] = None
    config: Optional[str] = None
    tol: float = 1e-7

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model: unknown model {self.model!r}")
        for name in ("dt", "rho", "power", "duration", "tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive (got {getattr(self, name)})")
        if self.D < 1:
            raise ConfigError(f"D: must be >= 1 (got {self.D})")
        return self


def _model_config(spec: RunSpec) -> dict:
    if spec.config is None:
        return {}
    cfg = models.read_config(spec.config)
    return {k: v for k, v in cfg.items() if k not in RUN_KEYS}


def build_experiment(spec: RunSpec):
    cfg = _model_config(spec)
    try:
        if spec.model == "dc-motor":
            x0_speed = float(cfg.pop("x0_speed", 0.0))
            params, limits, N, weights = models.dc_motor_from_config(cfg)
            return DcMotorExperiment(spec.dt, N, params, limits, weights, x0_speed)
        if spec.model == "unicycles":
            return UnicycleExperiment(models.unicycle_spec_from_config({**cfg, "dt": spec.dt}))
        if cfg:
            raise ValueError(f"toy-qp takes no model keys, got {sorted(cfg)}")
        return ToyQPExperiment(spec.dt)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"config: {err}") from err


def error_window(exp, duration):
    # the dc-motor window covers the second reference plateau; shorter runs use everything
    if exp.name == "dc-motor" and duration >= 4.0:
        return 2.0, 4.0
    return 0.0, duration


def resolve_spec(args) -> RunSpec:
    try:
        file_cfg = models.read_config(args.config) if getattr(args, "config", None) else {}
    except ValueError as err:
        raise ConfigError(f"config: {err}") from err
    values = dict(DEFAULTS)
    values.update({k: file_cfg[k] for k in RUN_KEYS if k in file_cfg})
    for k in RUN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if values.get("dt") is None:
        raise ConfigError("dt: required (pass --dt or set dt in the config file)")
    try:
        spec = RunSpec(
            model=args.model, dt=float(values["dt"]), rho=float(values["rho"]), power=float(values["power"]),
            D=int(values["D"]), duration=float(values["duration"]), seed=int(values["seed"]),
            out=getattr(args, "out", None), config=getattr(args, "config", None), tol=float(values["tol"]),
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config: {err}") from err
    return spec.validate()


def _reference_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".reference" + (p.suffix or ".csv"))


def cmd_track(spec: RunSpec) -> int:
    exp = build_experiment(spec)
    w0 = initial_solution(exp, spec.rho, spec.tol)
    trace = run_closed_loop(exp, SolverConfig(rho=spec.rho, D=spec.D), BudgetModel(spec.power),
                            spec.duration, seed=spec.seed, w_star0=w0)
    ref = run_reference_loop(exp, spec.rho, spec.duration, spec.tol, w_star0=w0)
    out = Path(spec.out or f"{exp.name}.csv")
    trace.to_csv(out)
    ref.to_csv(_reference_path(str(out)))
    t0, t1 = error_window(exp, spec.duration)
    E = output_error(exp, trace, ref, t0, t1)
    print(f"wrote {out} and {_reference_path(str(out))}; M={trace.M} D={spec.D} E[{t0:g},{t1:g}]={E:.6g}")
    return 0


def sweep_point(spec: RunSpec):
    exp = build_experiment(spec)
    w0 = initial_solution(exp, spec.rho, spec.tol)
    trace = run_closed_loop(exp, SolverConfig(rho=spec.rho, D=spec.D), BudgetModel(spec.power),
                            spec.duration, seed=spec.seed, w_star0=w0)
    ref = run_reference_loop(exp, spec.rho, spec.duration, spec.tol, w_star0=w0)
    t0, t1 = error_window(exp, spec.duration)
    mask = trace.window(t0, t1)
    return (output_error(exp, trace, ref, t0, t1), float(np.mean(np.asarray(trace.omega)[mask])),
            float(np.mean(np.asarray(trace.feas)[mask])))


def cmd_sweep(spec: RunSpec, axis: str, grid) -> int:
    if not grid:
        raise ConfigError("grid: must contain at least one value")
    cast = int if axis == "D" else float
    try:
        values = [cast(v) for v in grid]
    except ValueError as err:
        raise ConfigError(f"grid: {err}") from err
    points = [replace(spec, **{axis: v}).validate() for v in values]
    threads = int(os.environ.get(THREADS_ENV, "1"))
    if threads > 1 and len(points) > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(sweep_point, points))
    else:
        results = [sweep_point(p) for p in points]
    out = Path(spec.out or f"sweep_{axis}.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "E", "mean_omega", "mean_feasG"])
        for p, (E, om, fe) in zip(points, results):
            w.writerow([repr(getattr(p, axis)), f"{E:.17g}", f"{om:.17g}", f"{fe:.17g}"])
    print(f"wrote {out} ({len(points)} rows)")
    return 0


def cmd_solve(spec: RunSpec, s_values=None) -> int:
    exp = build_experiment(spec)
    nlp = exp.nlp
    if s_values is not None:
        s = np.asarray(s_values, dtype=float)
        if s.shape != (nlp.param_dim,):
            raise ConfigError(f"s: expected {nlp.param_dim} values, got {s.size}")
    elif exp.name == "toy-qp":
        s = np.array([1.0])
    else:
        s = exp.parameter(exp.x_init, 0.0)
    w = PrimalDual(exp.initial_guess(s), np.zeros(nlp.n_g))
    w, info = full_solve(nlp, w, s, spec.rho, spec.tol, return_info=True)
    with np.printoptions(precision=10, threshold=12, edgeitems=6):
        print(f"z* = {w.z}")
        print(f"mu* = {w.mu}")
    print(f"omega = {info.omega:.3e}  |G| = {info.feas:.3e}  outer = {info.outer}  inner = {info.inner_iterations}")
    return 0


def _grid(text):
    return [t for t in (p.strip() for p in text.split(",")) if t]


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optrack", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", choices=MODELS, required=True)
        p.add_argument("--config", help="key = value file (model and run keys)")
        p.add_argument("--dt", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--tol", type=float)

    def run(p):
        p.add_argument("--power", type=float, help="primal sweeps per second")
        p.add_argument("--D", "-D", type=int, help="homotopy stages")
        p.add_argument("--duration", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("track", help="closed-loop run plus full-accuracy reference run")
    common(p)
    run(p)
    p = sub.add_parser("sweep", help="tracking error over a grid of one setting")
    common(p)
    run(p)
    p.add_argument("--axis", choices=("dt", "rho", "power", "D"), required=True)
    p.add_argument("--grid", type=_grid, required=True, help="comma-separated values")
    p = sub.add_parser("solve", help="solve one NLP to tolerance")
    common(p)
    p.add_argument("--s", type=_grid, help="parameter vector, comma-separated")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "solve" and args.dt is None:
            args.dt = 0.018 if args.model == "dc-motor" else (0.35 if args.model == "unicycles" else 0.1)
        spec = resolve_spec(args)
        if args.command == "track":
            return cmd_track(spec)
        if args.command == "sweep":
            return cmd_sweep(spec, args.axis, args.grid)
        return cmd_solve(spec, None if args.s is None else [float(v) for v in args.s])
    except ConfigError as err:
        print(f"optrack: error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as err:
        print(f"optrack: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # solver and integration failures
        print(f"optrack: failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
