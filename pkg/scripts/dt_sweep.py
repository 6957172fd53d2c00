"""Tracking error E against the sampling period on the DC motor.

    python3 scripts/dt_sweep.py --grid 0.002,0.004,0.008,0.018,0.03,0.04 --out dt_sweep.csv
"""
import argparse
import sys

from optrack import cli

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", default="0.002,0.004,0.008,0.018,0.03,0.04")
    p.add_argument("--power", default="2000")
    p.add_argument("--rho", default="100")
    p.add_argument("--seed", default="1")
    p.add_argument("--out", default="dt_sweep.csv")
    a = p.parse_args()
    # the sweep needs a base dt; every grid point overrides it
    sys.exit(cli.main(["sweep", "--model", "dc-motor", "--axis", "dt", "--grid", a.grid, "--dt", "0.018",
                       "--power", a.power, "--rho", a.rho, "--seed", a.seed, "--out", a.out]))
