"""Print the worst gradient-check error per case for the op and net scopes."""

import argparse

from arpmnet import tensor as T
from arpmnet.checks import TOLERANCE, run_scope

ap = argparse.ArgumentParser()
ap.add_argument("--scopes", default="op,block,net")
ap.add_argument("--seeds", type=int, default=5)
args = ap.parse_args()

with T.precision("float64"):
    for scope in args.scopes.split(","):
        for r in run_scope(scope, range(args.seeds)):
            flag = "ok  " if r.error < TOLERANCE else "FAIL"
            print(f"{flag} {scope:<6} {r.name:<40} {r.error:.2e}  redraws {r.redraws}")
