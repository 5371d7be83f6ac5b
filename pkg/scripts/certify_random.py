"""Certification sweep over random implicit RNN plants.

Usage: python3 scripts/certify_random.py [--count 20] [--n 3] [--nu 2]

For each seed: rank test, static controller and terminal design, and an
eigenvalue re-verification of both. One CSV row per seed goes to stdout.
"""
import argparse
import csv
import sys

import numpy as np

from vfrnn.casestudy import random_model
from vfrnn.constraints import box
from vfrnn.errors import VfrnnError
from vfrnn.model import rank_M_check
from vfrnn.synthesis import design_controller, design_terminal, empirical_bound, verify_controller, verify_terminal

FIELDS = ["seed", "unstable", "rank_M", "controller_margin", "gamma_c", "terminal_margin", "gamma_f", "error"]


def certify(seed, n, nu, length=200):
    m = random_model(seed, n=n, nu=nu, unstable=(seed % 2 == 1))
    row = {"seed": seed, "unstable": int(np.max(np.abs(np.linalg.eigvals(m.A))) > 1), "rank_M": int(rank_M_check(m))}
    if not row["rank_M"]:
        return row | {"error": "rank test failed"}
    try:
        db = empirical_bound(m, np.random.default_rng(seed).uniform(-0.5, 0.5, (length, m.m)))
        c = design_controller(m, db)
        row |= {"controller_margin": f"{verify_controller(m, c)['margin']:.3e}", "gamma_c": f"{c.gamma_c:.6g}"}
        t = design_terminal(m, db, U=box([-1.0] * m.m, [1.0] * m.m), Y=box([-1.0] * m.p, [1.0] * m.p))
        row |= {"terminal_margin": f"{verify_terminal(m, t)['margin']:.3e}", "gamma_f": f"{t.gamma_f:.6g}"}
    except VfrnnError as e:
        row["error"] = str(e)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--n", type=int, default=3)
    ap.add_argument("--nu", type=int, default=2)
    args = ap.parse_args()
    w = csv.DictWriter(sys.stdout, FIELDS)
    w.writeheader()
    for seed in range(args.count):
        w.writerow(certify(seed, args.n, args.nu))
        sys.stdout.flush()


if __name__ == "__main__":
    main()
