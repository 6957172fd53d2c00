"""Tracking error E against the penalty parameter on the DC motor.

    python3 scripts/rho_sweep.py --grid 10,20,50,100,200,500,1000 --out rho_sweep.csv
"""
import argparse
import sys

from optrack import cli

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", default="10,20,50,100,200,500,1000")
    p.add_argument("--dt", default="0.018")
    p.add_argument("--power", default="2000")
    p.add_argument("--seed", default="1")
    p.add_argument("--out", default="rho_sweep.csv")
    a = p.parse_args()
    sys.exit(cli.main(["sweep", "--model", "dc-motor", "--axis", "rho", "--grid", a.grid, "--dt", a.dt,
                       "--power", a.power, "--seed", a.seed, "--out", a.out]))
