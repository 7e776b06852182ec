"""Tree benchmark sweep: manual vs dynamic vs full-dynamic batching.

    python scripts/run_benchmark.py --out results/bench.csv
"""

import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from dynbatch.bench import BenchConfig, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 8, 32, 64, 128, 256])
    p.add_argument("--phases", nargs="+", default=["infer", "train"], choices=["infer", "train"])
    p.add_argument("--tree-size", type=int, default=128)
    p.add_argument("--state-size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--out", default="results/bench.csv")
    args = p.parse_args()

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    configs = [
        BenchConfig(mode=mode, phase=phase, batch_size=b, tree_size=args.tree_size,
                    state_size=args.state_size, repeats=args.repeats)
        for phase in args.phases for b in args.batch_sizes
        for mode in ("manual", "dynamic", "full-dynamic")
    ]
    with threadpool_limits(limits=1):
        report = run_benchmark(configs, write=False)
    report.write_csv(args.out)
    print(report.to_text())
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
