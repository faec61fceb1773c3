"""End-to-end toy pipeline through the CLI, with per-stage wall-clock times.

    python3 scripts/run_pipeline.py [--out runs/toy] [--seed 0]
"""
import argparse
import time

from thzlab.cli import main


def main_():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seed", default="0")
    args = ap.parse_args()
    common = ["--out", args.out]
    stages = [
        ["phantom", "--seed", args.seed, "--set", "phantom.size=32"],
        ["simulate", "--seed", args.seed, "--angles", "30", "--step", "6"],
        ["dataset", "--seed", args.seed],
        ["train", "--seed", args.seed],
        ["restore", "--pgm"],
        ["reconstruct"],
        ["eval", "--pred", f"{args.out}/restored", "--gt", f"{args.out}/views", "--name", "toy"],
    ]
    total = 0.0
    for argv in stages:
        t0 = time.perf_counter()
        code = main(argv + common)
        dt = time.perf_counter() - t0
        total += dt
        print(f"# {argv[0]:<12s} {dt:6.1f}s  exit {code}")
        if code:
            raise SystemExit(code)
    print(f"# total        {total:6.1f}s")


if __name__ == "__main__":
    main_()
