"""Seed-averaged ablation on the default synthetic data, with the DMF alpha sweep.

    python scripts/ablation.py --seeds 0,1,2,3,4 --alphas 0,0.3,0.7,1 --out ablation.json
"""
import argparse
import json
import logging
import time
from dataclasses import asdict

from dmf.experiment import ALPHA_GRID, ablation, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--strategies", default="ta,late,decoupled")
    p.add_argument("--alphas", default=",".join(f"{a:g}" for a in ALPHA_GRID))
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    t0 = time.perf_counter()
    results = ablation(seeds=[int(s) for s in args.seeds.split(",")],
                       strategies=tuple(s for s in args.strategies.split(",") if s),
                       alphas=tuple(float(a) for a in args.alphas.split(",")), epochs=args.epochs)
    report = {"summary": summarize(results), "runs": [asdict(r) for r in results],
              "seconds": time.perf_counter() - t0}
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(json.dumps(report["summary"], indent=2))


if __name__ == "__main__":
    main()
