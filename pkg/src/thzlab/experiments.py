"""Toy-scale training protocol shared by the acceptance suite and scripts/."""
from __future__ import annotations

import functools
import time

import numpy as np

from .model import ModelConfig
from .physics import PHANTOM_KINDS
from .train import (
    TrainConfig,
    degraded_baseline,
    evaluate,
    leave_one_family_out,
    predict,
    stack_inputs,
    train,
)

TOY_SEEDS = (0, 1, 2)


def held_out_family(seed: int) -> str:
    """Seed ``s`` holds out family ``s`` (mod the family count): leave-one-family-out."""
    return PHANTOM_KINDS[seed % len(PHANTOM_KINDS)]


@functools.lru_cache(maxsize=8)
def toy_split(seed: int):
    return leave_one_family_out(held_out_family(seed), seed=seed, n_train=200)


@functools.lru_cache(maxsize=None)
def toy_run(variant: str, seed: int, steps: int = 300, lr: float = 1e-4) -> dict:
    """Train one toy model and score it on the held-out family."""
    split = toy_split(seed)
    cfg = ModelConfig.toy(variant=variant)
    t0 = time.perf_counter()
    res = train(split, cfg, TrainConfig(steps=steps, lr=lr, seed=seed))
    res.store.load_arrays(res.best_store_arrays)
    x, y = stack_inputs(split.test)
    test = evaluate(predict(res.store, cfg, x), y)
    base = evaluate(degraded_baseline(split.test), y)
    return {
        "variant": variant,
        "seed": seed,
        "held_out": split.held_out,
        "initial_loss": float(np.mean(res.losses[:5])),
        "final_loss": float(np.mean(res.losses[-25:])),
        "test_psnr": test["psnr"],
        "test_ssim": test["ssim"],
        "degraded_psnr": base["psnr"],
        "degraded_ssim": base["ssim"],
        "params": res.store.count(),
        "seconds": time.perf_counter() - t0,
    }
