"""Synthetic datasets, loss, Adam and the training loop."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .metrics import psnr, ssim
from .model import ModelConfig, forward, init_model
from .nn import ParamStore
from .physics import (
    PHANTOM_KINDS,
    BandTable,
    DegradeParams,
    Material,
    SpectralProjection,
    degrade,
    fit_ranges,
    make_phantom,
    path_integrals,
)
from .tensor import GradTape, NonFiniteError, Tensor, mse, no_tape


def mse_loss(x_rec, x_gt) -> Tensor:
    """``(1 / HW) sum (gt - rec)^2``, averaged over a batch if one is given."""
    a = x_rec if isinstance(x_rec, Tensor) else Tensor(x_rec)
    b = x_gt if isinstance(x_gt, Tensor) else Tensor(x_gt)
    return mse(a, b)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def scalars(self) -> dict:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: list[Tensor], grads: list, state: OptimState, lr: float) -> OptimState:
    """Bias-corrected Adam update, in place on ``params``.

    Raises :class:`NonFiniteError` before touching anything if a gradient
    holds NaN or Inf.
    """
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name or 'parameter'} at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        key = p.name or i
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_schedule(epoch: int, initial: float = 1e-4, decay: float = 0.1, every: int = 300) -> float:
    """Staircase decay by ``decay`` every ``every`` epochs."""
    return initial * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    families: tuple[str, ...] = PHANTOM_KINDS
    size: int = 32
    angle_step: float = 6.0
    n_range: tuple[float, float] = (1.3, 1.7)
    alpha_range: tuple[float, float] = (0.02, 0.2)
    psf_k: float = 0.5
    snr_db: float = 20.0


def make_samples(family: str, count: int, seed: int, cfg: DataConfig = DataConfig(),
                 bands: BandTable = BandTable()) -> list[SpectralProjection]:
    """``count`` degraded views of fresh phantoms of one family.

    Every sample draws its own phantom (seed from the family stream), a
    random material and a random view angle on the ``angle_step`` grid.
    """
    rng = np.random.default_rng([seed, PHANTOM_KINDS.index(family)])
    params = DegradeParams(psf_k=cfg.psf_k, snr_db=cfg.snr_db)
    n_angles = int(round(180.0 / cfg.angle_step))
    out = []
    for i in range(count):
        mat = Material(float(rng.uniform(*cfg.n_range)), float(rng.uniform(*cfg.alpha_range)))
        ph_seed = int(rng.integers(2 ** 31))
        kw = {}
        if family == "disk":
            kw = {"radius": float(rng.uniform(0.15, 0.4) * cfg.size),
                  "center": tuple(rng.uniform(-0.1, 0.1, size=2) * cfg.size)}
        ph = make_phantom(family, cfg.size, materials=(mat,), seed=ph_seed, **kw)
        angle = float(rng.integers(n_angles) * cfg.angle_step)
        sp = degrade(path_integrals(ph, angle), bands, params, rng)
        sp.meta.update(family=family, phantom_seed=ph_seed, index=i)
        out.append(sp)
    return out


@dataclass
class Split:
    train: list
    val: list
    test: list
    held_out: str
    ranges: np.ndarray


def leave_one_family_out(held_out: str, seed: int, n_train: int = 200, n_val: int = 24,
                         n_test: int = 48, cfg: DataConfig = DataConfig()) -> Split:
    """Train/val on every family but ``held_out``; test on ``held_out`` only.

    Normalization ranges are fitted on the training split and frozen onto
    all three splits.
    """
    fams = [f for f in cfg.families if f != held_out]
    if held_out not in cfg.families or not fams:
        raise ValueError(f"held-out family {held_out!r} must be one of {cfg.families} with others left")
    per = -(-(n_train + n_val) // len(fams))
    pool = []
    for f in fams:
        pool.extend(make_samples(f, per, seed, cfg))
    order = np.random.default_rng([seed, 99]).permutation(len(pool))
    pool = [pool[i] for i in order]
    train, val = pool[:n_train], pool[n_train:n_train + n_val]
    test = make_samples(held_out, n_test, seed + 7919, cfg)
    ranges = fit_ranges(train)
    for s in train + val + test:
        s.ranges = ranges
    return Split(train, val, test, held_out, ranges)


def stack_inputs(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.normalized() for s in samples])
    y = np.stack([s.clean_gt for s in samples])
    return x, y


def degraded_baseline(samples) -> np.ndarray:
    """Naive restoration: inverted normalized Time-max (objects bright, as in the GT)."""
    return np.stack([1.0 - s.normalized()[:1] for s in samples])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 300    # epochs
    seed: int = 0
    log_path: str | None = None
    checkpoint_path: str | None = None


@dataclass
class TrainResult:
    store: ParamStore
    best_store_arrays: dict
    log: list
    losses: list
    opt: OptimState
    best_epoch: int


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches of one epoch: a fresh permutation, trailing partial batch dropped."""
    order = rng.permutation(n)
    per_epoch = max(n // batch_size, 1)
    return [np.sort(order[b * batch_size:(b + 1) * batch_size]) for b in range(per_epoch)]


def predict(store: ParamStore, cfg: ModelConfig, x: np.ndarray, batch: int = 16) -> np.ndarray:
    outs = []
    with no_tape():
        for i in range(0, len(x), batch):
            outs.append(forward(x[i:i + batch], store, cfg, training=False).data)
    return np.concatenate(outs)


def evaluate(pred: np.ndarray, gt: np.ndarray) -> dict:
    p = [psnr(a, b) for a, b in zip(pred, gt)]
    s = [ssim(a, b) for a, b in zip(pred, gt)]
    return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s)), "per_view_psnr": p, "per_view_ssim": s}


def train(split: Split, model_cfg: ModelConfig, tcfg: TrainConfig = TrainConfig(),
          store: ParamStore | None = None) -> TrainResult:
    """Mini-batch Adam on MSE with per-epoch validation and best-val checkpointing.

    An epoch is one pass over a fresh permutation of the training split;
    a trailing partial batch is dropped. Runs a fixed number of steps.
    """
    x_tr, y_tr = stack_inputs(split.train)
    x_va, y_va = stack_inputs(split.val)
    store = store or init_model(model_cfg, seed=tcfg.seed)
    params = store.trainable()
    opt = OptimState()
    rng = np.random.default_rng([tcfg.seed, 1])
    log, losses = [], []
    best, best_arrays, best_epoch = -np.inf, None, -1
    epoch, step = 0, 0
    log_file = Path(tcfg.log_path) if tcfg.log_path else None
    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        log_file.write_text("")
    while step < tcfg.steps:
        lr = lr_schedule(epoch, tcfg.lr, tcfg.decay, tcfg.decay_every)
        ep_loss = []
        for idx in epoch_batches(len(x_tr), tcfg.batch_size, rng):
            if step >= tcfg.steps:
                break
            with GradTape() as tape:
                loss = mse_loss(forward(x_tr[idx], store, model_cfg, training=True), y_tr[idx])
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"loss diverged at step {step}")
            grads = tape.gradient(loss, params)
            adam_step(params, grads, opt, lr)
            losses.append(float(loss.data))
            ep_loss.append(float(loss.data))
            step += 1
        metrics = evaluate(predict(store, model_cfg, x_va), y_va)
        rec = {"epoch": epoch, "loss": float(np.mean(ep_loss)), "val_psnr": metrics["psnr"],
               "val_ssim": metrics["ssim"], "lr": lr}
        log.append(rec)
        if log_file:
            with log_file.open("a") as fh:
                fh.write(json.dumps(io.jsonable(rec)) + "\n")
        if metrics["psnr"] > best:
            best, best_epoch = metrics["psnr"], epoch
            best_arrays = {k: v.copy() for k, v in store.state_arrays().items()}
            if tcfg.checkpoint_path:
                save_checkpoint(tcfg.checkpoint_path, store, model_cfg, opt, epoch, split.ranges)
        epoch += 1
    return TrainResult(store, best_arrays, log, losses, opt, best_epoch)


def save_checkpoint(path, store: ParamStore, cfg: ModelConfig, opt: OptimState | None = None,
                    epoch: int | None = None, ranges: np.ndarray | None = None) -> Path:
    """Single TZT1 bundle: parameters, BN statistics, ModelConfig, Adam scalars and input ranges."""
    meta = {"kind": "checkpoint", "model": cfg.to_dict(), "optim": opt.scalars() if opt else None,
            "epoch": epoch, "ranges": None if ranges is None else np.asarray(ranges).tolist()}
    return io.save_bundle(path, store.state_arrays(), meta)


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig, dict]:
    arrays, meta = io.load_bundle(path)
    if meta.get("kind") != "checkpoint":
        raise io.FormatError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**meta["model"])
    store = init_model(cfg)
    store.load_arrays(arrays)
    return store, cfg, meta


def run_summary(res: TrainResult) -> dict:
    return {"initial_loss": res.losses[0], "final_loss": res.losses[-1], "best_epoch": res.best_epoch,
            "epochs": len(res.log)}
