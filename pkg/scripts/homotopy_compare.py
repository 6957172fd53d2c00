"""Median tracking error with and without homotopy stages on the DC motor.

    python3 scripts/homotopy_compare.py --power 3000 --stages 1,3 --out homotopy.csv
"""
import argparse
import csv

import numpy as np

from optrack.cli import error_window
from optrack.sim import BudgetModel, DcMotorExperiment, initial_solution, output_error, run_closed_loop, \
    run_reference_loop
from optrack.solver import SolverConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", default="0.006,0.012,0.018,0.03")
    p.add_argument("--stages", default="1,3")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--power", type=float, default=3000.0)
    p.add_argument("--rho", type=float, default=100.0)
    p.add_argument("--duration", type=float, default=6.0)
    p.add_argument("--out", default="homotopy.csv")
    a = p.parse_args()
    stages = [int(v) for v in a.stages.split(",")]
    seeds = [int(v) for v in a.seeds.split(",")]
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dt"] + [f"E_D{D}" for D in stages])
        for dt in (float(v) for v in a.grid.split(",")):
            exp = DcMotorExperiment(dt)
            w0 = initial_solution(exp, a.rho)
            ref = run_reference_loop(exp, a.rho, a.duration, w_star0=w0)
            t0, t1 = error_window(exp, a.duration)
            row = []
            for D in stages:
                E = [output_error(exp, run_closed_loop(exp, SolverConfig(rho=a.rho, D=D), BudgetModel(a.power),
                                                       a.duration, seed=s, w_star0=w0), ref, t0, t1)
                     for s in seeds]
                row.append(float(np.median(E)))
            w.writerow([repr(dt)] + [f"{e:.17g}" for e in row])
            print(f"dt={dt:g} " + " ".join(f"D={D}: {e:.4g}" for D, e in zip(stages, row)), flush=True)


if __name__ == "__main__":
    main()
