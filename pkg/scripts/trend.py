"""Run the desk-scale depth-guidance benchmark: HHA teachers, then baseline,
semi-teaching and fully-teaching students over three seeds.

    python scripts/trend.py --out runs/trend [--seeds 0 1 2]
"""

import argparse
from dataclasses import replace

from stdg.trend import TrendConfig, format_result, run_trend


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/trend")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    cfg = TrendConfig()
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if args.epochs:
        cfg = replace(cfg, regime=replace(cfg.regime, epochs=args.epochs))
    res = run_trend(cfg, args.out, progress=lambda m: print(m, flush=True))
    print(format_result(res))


if __name__ == "__main__":
    main()
