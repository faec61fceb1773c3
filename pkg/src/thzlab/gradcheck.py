"""Finite-difference verification of tape adjoints."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, kink_monitor, no_tape, weighted_sum


@dataclass
class GradCheckReport:
    name: str
    rel_tol: float
    max_rel_err: float
    per_input: dict[str, float] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)
    jitters: int = 0
    crossed: int = 0
    unchecked: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.rel_tol and not self.unchecked

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rel_tol": self.rel_tol,
            "max_rel_err": self.max_rel_err,
            "per_input": self.per_input,
            "absent": self.absent,
            "jitters": self.jitters,
            "crossed": self.crossed,
            "unchecked": self.unchecked,
            "passed": self.passed,
        }


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale < 1e-300:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def _kink_distance(fn, inputs) -> float:
    with no_tape(), kink_monitor() as log:
        fn(*inputs)
    return log.min_distance


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rel_tol: float = 1e-5,
               max_checks: int = 24, seed: int = 0, name: str = "op",
               kink_margin: float = 1e-4, max_jitter: int = 20, max_dir_tries: int = 8) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    The output is reduced to a scalar with fixed random weights. For each
    trainable input, up to ``max_checks`` coordinates are probed with step
    ``1e-6 * (1 + |x|)``, plus one random directional derivative. The
    error per input is the max-abs deviation over the probed set divided by
    the largest gradient magnitude in it. Never raises on mismatch.

    Central differences are meaningless across a relu or maxpool kink. If
    any relu input (or maxpool top-2 gap) lies within ``kink_margin``, the
    trainable inputs are jittered by ~1e-3 relative noise and the check is
    retried, up to ``max_jitter`` times (count reported in ``jitters``).
    Large networks always keep a few elements near a kink, so every probe
    also compares the branch pattern of relu/maxpool with the unperturbed
    pass; a probe that flips a branch is discarded and replaced by another
    coordinate or direction (count reported in ``crossed``).
    """
    rng = np.random.default_rng(seed)
    jitters = 0
    while jitters < max_jitter and _kink_distance(fn, inputs) < kink_margin:
        for t in inputs:
            if t.requires_grad:
                noise = 1e-3 * (np.abs(t.data) + 1e-2) * rng.standard_normal(t.shape)
                t.data = (t.data + noise).astype(t.data.dtype)
        jitters += 1
    with no_tape():
        probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape)

    def scalar() -> tuple[float, str]:
        with no_tape(), kink_monitor() as log:
            val = float(np.sum(fn(*inputs).data * weights))
        return val, log.signature()

    base = scalar()[1]
    with GradTape() as tape:
        loss = weighted_sum(fn(*inputs), weights)
    grads = tape.gradient(loss, list(inputs))

    report = GradCheckReport(name=name, rel_tol=rel_tol, max_rel_err=0.0, jitters=jitters)
    for k, (t, g) in enumerate(zip(inputs, grads)):
        label = t.name or f"input{k}"
        if g is None:
            report.absent.append(label)
            continue
        t.data = np.ascontiguousarray(t.data)
        x = t.data
        flat = x.reshape(-1)
        n = flat.size
        order = rng.permutation(n)[:4 * max_checks]
        picks, fd = [], []
        for i in order:
            if len(picks) == max_checks:
                break
            orig = flat[i]
            h = 1e-6 * (1 + abs(orig))
            flat[i] = orig + h
            fp, sp = scalar()
            flat[i] = orig - h
            fm, sm = scalar()
            flat[i] = orig
            if sp != base or sm != base:
                report.crossed += 1
                continue
            picks.append(i)
            fd.append((fp - fm) / (2 * h))
        err = _rel_err(g.reshape(-1)[picks], np.array(fd)) if picks else 0.0

        orig = x.copy()
        h = 1e-6 * (1 + np.max(np.abs(x)))
        for _ in range(max_dir_tries):
            v = rng.standard_normal(x.shape)
            x += h * v
            fp, sp = scalar()
            x[...] = orig - h * v
            fm, sm = scalar()
            x[...] = orig
            if sp != base or sm != base:
                report.crossed += 1
                continue
            dd_fd = (fp - fm) / (2 * h)
            dd_tape = float(np.sum(g * v))
            dscale = max(abs(dd_fd), abs(dd_tape), 1e-300)
            err = max(err, abs(dd_fd - dd_tape) / dscale)
            break
        if not picks:
            report.unchecked.append(label)

        report.per_input[label] = float(err)
        report.max_rel_err = float(max(report.max_rel_err, err))
    return report
