"""Toy ablation: SARNet-lite vs U-Net-lite-MS vs U-Net-lite-base over three seeds.

    python3 scripts/ablation.py [--steps 300] [--lr 1e-4] [--out ablation.jsonl]
"""
import argparse
import json

import numpy as np

from thzlab.experiments import TOY_SEEDS, toy_run

VARIANTS = ("sarnet", "unet-ms", "unet-base")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(TOY_SEEDS))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    rows = []
    for seed in args.seeds:
        for v in VARIANTS:
            r = toy_run(v, seed, steps=args.steps, lr=args.lr)
            rows.append(r)
            print(json.dumps({k: round(x, 4) if isinstance(x, float) else x for k, x in r.items()}), flush=True)
    print("\nmean held-out PSNR (dB)")
    for v in VARIANTS:
        p = [r["test_psnr"] for r in rows if r["variant"] == v]
        print(f"  {v:10s} {np.mean(p):7.3f}  ({', '.join(f'{x:.2f}' for x in p)})")
    base = np.mean([r["degraded_psnr"] for r in rows if r["variant"] == VARIANTS[0]])
    print(f"  {'degraded':10s} {base:7.3f}")
    if args.out:
        with open(args.out, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main()
