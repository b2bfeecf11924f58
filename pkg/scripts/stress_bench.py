"""Closed-loop QPS for every serving strategy at the stress configuration.

    python scripts/stress_bench.py --duration 5 --csv qps.csv
"""
import argparse
import json

from dmf.serving import SERVING_STRATEGIES, qps_bench, synthetic_engine, to_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--strategies", default=",".join(SERVING_STRATEGIES))
    p.add_argument("--b", type=int, default=1200)
    p.add_argument("--l", type=int, default=400)
    p.add_argument("--d-h", type=int, default=128, dest="d_h")
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv")
    args = p.parse_args()
    reports = []
    for st in args.strategies.split(","):
        eng = synthetic_engine(st, d_h=args.d_h)
        rep = qps_bench(st, args.b, args.l, args.d_h, args.duration, args.workers, engine=eng)
        print(f"{st:12s} qps={rep['qps']:8.2f} p50={rep['latency_p50_us'] / 1e3:8.1f}ms "
              f"p99={rep['latency_p99_us'] / 1e3:8.1f}ms")
        reports.append(rep)
    base = {r["strategy"]: r["qps"] for r in reports}
    if "early" in base:
        print(json.dumps({k: v / base["early"] for k, v in base.items()}, indent=2))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(to_csv(reports))


if __name__ == "__main__":
    main()
