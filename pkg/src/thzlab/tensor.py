"""Minimal tensor engine with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays. Spatial ops take ``[C, H, W]`` or ``[B, C, H, W]``
arrays; the channel axis is always ``-3``. Every op checks its output for
NaN/Inf and raises :class:`NonFiniteError`.

Gradients are recorded on an explicit :class:`GradTape`::

    with GradTape() as tape:
        y = sigmoid(conv2d(x, w))
        loss = sum_all(y)
    gx, gw = tape.gradient(loss, [x, w])
"""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, special


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    """Shape mismatch, naming the op and offending axis."""

    def __init__(self, op: str, axis: str, got, expected):
        self.op, self.axis, self.got, self.expected = op, axis, got, expected
        super().__init__(f"{op}: axis {axis} has extent {got}, expected {expected}")


class SingularBasisError(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        self.cond = cond
        super().__init__(f"Gram matrix singular after regularization (cond ~ {cond:.3e})")


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, {self.precision}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of executed ops; replayed in reverse by :meth:`gradient`.

    A tape is single-owner; do not share one between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None):
        """Adjoints of ``target`` w.r.t. ``sources``.

        Returns one array per source. Sources with ``requires_grad=False``
        get ``None``; trainable sources the target does not depend on get
        zeros.
        """
        if seed is None:
            if target.data.size != 1:
                raise ValueError("non-scalar target needs an explicit seed")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.data.dtype)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            if not s.requires_grad:
                out.append(None)
            else:
                out.append(grads.get(id(s), np.zeros_like(s.data)))
        return out


@contextlib.contextmanager
def no_tape():
    """Temporarily disable recording (e.g. for evaluation passes)."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _ACTIVE[-1].records.append(_Record(op, out, inputs, vjp))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, "all", b.shape, a.shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


# While a kink monitor is active, relu and maxpool log how close their
# inputs sit to a non-smooth point and which branch each element took.
# grad_check uses the distance to jitter inputs off kinks and the branch
# signature to discard probes that crossed one.
class BranchLog:
    def __init__(self):
        self.distances: list[float] = []
        self._digest = hashlib.blake2b(digest_size=16)

    def note(self, dist, pattern) -> None:
        if np.size(dist):
            self.distances.append(float(np.min(dist)))
        self._digest.update(np.ascontiguousarray(pattern).tobytes())

    @property
    def min_distance(self) -> float:
        return min(self.distances, default=np.inf)

    def signature(self) -> str:
        return self._digest.hexdigest()


_KINKS: list[BranchLog] = []


@contextlib.contextmanager
def kink_monitor():
    log = BranchLog()
    _KINKS.append(log)
    try:
        yield log
    finally:
        _KINKS.remove(log)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINKS:
        _KINKS[-1].note(np.abs(x.data), mask)
    return _emit("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` with constant weights; used by gradient checks."""
    w = np.asarray(w, dtype=x.data.dtype)
    return _emit("weighted_sum", np.sum(x.data * w), (x,), lambda g: (g * w,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    _same_shape("mse", a, b)
    d = a.data - b.data
    n = d.size
    return _emit("mse", np.mean(d * d), (a, b), lambda g: (2 * g * d / n, -2 * g * d / n))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis: ``a`` fills ``[0, C1)``, ``b`` fills ``[C1, C1+C2)``."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat_channels", "ndim", b.data.ndim, a.data.ndim)
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError("concat_channels", "H,W", b.shape[-2:], a.shape[-2:])
    if a.shape[:-3] != b.shape[:-3]:
        raise ShapeError("concat_channels", "B", b.shape[:-3], a.shape[:-3])
    c1 = a.shape[-3]
    data = np.concatenate([a.data, b.data], axis=-3)
    return _emit("concat_channels", data, (a, b), lambda g: (g[..., :c1, :, :], g[..., c1:, :, :]))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :, :] = g
        return (gx,)
    return _emit("channel_slice", x.data[..., start:stop, :, :].copy(), (x,), vjp)


def split_channels(x: Tensor, c1: int) -> tuple[Tensor, Tensor]:
    return channel_slice(x, 0, c1), channel_slice(x, c1, x.shape[-3])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``; leading dims must agree exactly."""
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", "batch", b.shape[:-2], a.shape[:-2])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner", b.shape[-2], a.shape[-1])

    def vjp(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)
    return _emit("matmul", a.data @ b.data, (a, b), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)
    return _emit("softmax", y, (x,), vjp)


def tikhonov(a: Tensor, eps_reg: float) -> Tensor:
    """``A + eps*I`` with ``eps = eps_reg * trace(A) / K`` per batch item."""
    k = a.shape[-1]
    eye = np.eye(k, dtype=a.data.dtype)
    tr = np.trace(a.data, axis1=-2, axis2=-1)[..., None, None]
    data = a.data + (eps_reg / k) * tr * eye

    def vjp(g):
        gtr = np.trace(g, axis1=-2, axis2=-1)[..., None, None]
        return (g + (eps_reg / k) * gtr * eye,)
    return _emit("tikhonov", data, (a,), vjp)


def spd_solve(a: Tensor, b: Tensor, max_cond: float = 1e14) -> Tensor:
    """Solve ``A Y = B`` for symmetric positive-definite ``A`` (batched).

    Uses a Cholesky factorization per batch item. Raises
    :class:`SingularBasisError` when ``A`` is not numerically positive
    definite.
    """
    a2 = a.data.reshape((-1,) + a.shape[-2:])
    b2 = b.data.reshape((-1,) + b.shape[-2:])
    factors, ys = [], []
    for ai, bi in zip(a2, b2):
        cond = _cond_estimate(ai)
        if not np.isfinite(cond) or cond > max_cond:
            raise SingularBasisError(cond)
        try:
            cf = linalg.cho_factor(ai, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise SingularBasisError(cond) from None
        factors.append(cf)
        ys.append(linalg.cho_solve(cf, bi, check_finite=False))
    y = np.stack(ys).reshape(b.shape[:-2] + (a.shape[-1], b.shape[-1]))

    def vjp(g):
        g2 = g.reshape((-1,) + g.shape[-2:])
        gb = np.stack([linalg.cho_solve(cf, gi, check_finite=False) for cf, gi in zip(factors, g2)])
        gb = gb.reshape(b.shape)
        ga = -gb @ np.swapaxes(y, -1, -2)
        return (ga, gb)
    return _emit("spd_solve", y, (a, b), vjp)


def _cond_estimate(a: np.ndarray) -> float:
    w = np.linalg.eigvalsh(a)
    if w[0] <= 0:
        return float("inf")
    return float(w[-1] / w[0])


# ---------------------------------------------------------------------------
# convolution and normalization
# ---------------------------------------------------------------------------

def _batched(x: Tensor) -> bool:
    if x.data.ndim == 4:
        return True
    if x.data.ndim == 3:
        return False
    raise ShapeError("spatial op", "ndim", x.data.ndim, "3 or 4")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: str = "same") -> Tensor:
    """2-D cross-correlation (no kernel flip), zero padding for ``same``.

    x: ``[C_in, H, W]`` or ``[B, C_in, H, W]``; w: ``[C_out, C_in, L, L]``.
    """
    batched = _batched(x)
    xd = x.data if batched else x.data[None]
    if w.data.ndim != 4:
        raise ShapeError("conv2d", "kernel ndim", w.data.ndim, 4)
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", "L", (kh, kw), "odd square kernel")
    if xd.shape[1] != c_in:
        raise ShapeError("conv2d", "C_in", xd.shape[1], c_in)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", "C_out (bias)", bias.shape, (c_out,))
    if pad == "same":
        p = kh // 2
    elif pad == "valid":
        p = 0
    else:
        raise ValueError(f"unknown pad {pad!r}")
    bsz, _, h, wd = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "H,W", (h, wd), f">= {kh}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: [B, C_in, Ho, Wo, L, L]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, C_out]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def vjp(g):
        gb = g if batched else g[None]
        gw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))  # [C_out, C_in, L, L]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(gb, w.data[:, :, i, j], axes=([1], [0]))  # [B,Ho,Wo,C_in]
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if not batched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", out, inputs, vjp)


@dataclass
class BNState:
    """Running statistics of one batch-norm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BNState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState | None = None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics (biased variance) and, when a
    ``state`` is given, updates its running mean/var (unbiased) in place.
    Eval mode uses ``state``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    batched = _batched(x)
    xd = x.data if batched else x.data[None]
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", "C", gamma.shape, (c,))
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if m == 0:
        raise ShapeError("batch_norm", "channel size", 0, ">0")
    axes = (0, 2, 3)
    shp = (1, c, 1, 1)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if state is not None:
            unbiased = var * m / max(m - 1, 1)
            state.mean[...] = (1 - momentum) * state.mean + momentum * mu
            state.var[...] = (1 - momentum) * state.var + momentum * unbiased
    else:
        if state is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mu, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(shp)) * invstd.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)
    if not batched:
        out = out[0]

    def vjp(g):
        gb = g if batched else g[None]
        ggamma = np.sum(gb * xhat, axis=axes)
        gbeta = np.sum(gb, axis=axes)
        gxhat = gb * gamma.data.reshape(shp)
        if training:
            gx = (invstd.reshape(shp) / m) * (
                m * gxhat
                - np.sum(gxhat, axis=axes, keepdims=True)
                - xhat * np.sum(gxhat * xhat, axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * invstd.reshape(shp)
        if not batched:
            gx = gx[0]
        return (gx, ggamma, gbeta)

    return _emit("batch_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# resampling and pooling
# ---------------------------------------------------------------------------

def downsample2(x: Tensor, kind: str = "maxpool") -> Tensor:
    """Halve H and W with 2x2 windows: ``maxpool`` or ``area`` (block mean)."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError("downsample2", "H,W", (h, w), "even extents")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // 2, 2, w // 2, 2))
    if kind == "area":
        out = blocks.mean(axis=(-3, -1))

        def vjp(g):
            gx = np.broadcast_to(g[..., :, None, :, None] / 4, blocks.shape)
            return (gx.reshape(x.shape).copy(),)
        return _emit("downsample2_area", out, (x,), vjp)
    if kind != "maxpool":
        raise ValueError(f"unknown downsample kind {kind!r}")
    flat = np.moveaxis(blocks, -3, -2).reshape(lead + (h // 2, w // 2, 4))
    idx = np.argmax(flat, axis=-1)
    if _KINKS:
        top2 = np.sort(flat, axis=-1)[..., -2:]
        _KINKS[-1].note(top2[..., 1] - top2[..., 0], idx.astype(np.int8))
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gblocks = np.moveaxis(gflat.reshape(lead + (h // 2, w // 2, 2, 2)), -2, -3)
        return (gblocks.reshape(x.shape),)
    return _emit("downsample2_max", out, (x,), vjp)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # Corner-aligned: output pixel k sits at input coordinate k (n - 1) / (2n - 1),
    # so the first and last pixel centers of input and output coincide.
    m = 2 * n
    pos = np.arange(m) * ((n - 1) / (m - 1)) if n > 1 else np.zeros(m)
    i0 = np.minimum(np.floor(pos).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = pos - i0
    u = np.zeros((m, n), dtype=dtype)
    np.add.at(u, (np.arange(m), i0), 1 - frac)
    np.add.at(u, (np.arange(m), i1), frac)
    return u


def upsample2(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling, corner-aligned (``align_corners=True`` convention)."""
    h, w = x.shape[-2:]
    uh = _upsample_matrix(h, x.data.dtype)
    uw = _upsample_matrix(w, x.data.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def vjp(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)
    return _emit("upsample2", out, (x,), vjp)


def spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over H, W; keeps singleton spatial dims."""
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)
    return _emit("spatial_mean", out, (x,), vjp)


def scale_channels(x: Tensor, w: Tensor) -> Tensor:
    """``x * w`` where ``w`` has singleton spatial dims (``[..., C, 1, 1]``)."""
    if w.shape[:-2] != x.shape[:-2] or w.shape[-2:] != (1, 1):
        raise ShapeError("scale_channels", "C", w.shape, x.shape[:-2] + (1, 1))

    def vjp(g):
        return (g * w.data, np.sum(g * x.data, axis=(-2, -1), keepdims=True))
    return _emit("scale_channels", x.data * w.data, (x, w), vjp)
