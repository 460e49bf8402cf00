"""Run the seeded desk-scale experiment and print the per-class DSC table.

    python scripts/run_desk_experiment.py --out runs/desk --seed 0
"""

import argparse
import sys

from arpmnet.experiment import desk_config, run_desk


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    result = run_desk(args.out, desk_config(args.seed, args.count), threads=args.threads)
    print(result.table())
    print("timings (s): " + ", ".join(f"{k} {v:.0f}" for k, v in result.seconds.items()))
    ok, notes = result.criterion()
    print("desk criterion:", "PASS" if ok else "FAIL")
    for n in notes:
        print("  " + n)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
