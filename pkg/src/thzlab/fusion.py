"""Subspace-and-attention guided fusion (SAFM) and channel attention (CAM).

SAFM, for amplitude/phase band stacks ``xa, xp`` of shape ``[B, 3, H, W]``
(N = H*W locations):

    V    = f_F(concat(f_C^A(xa), f_C^P(xp)))  reshaped to [B, N, K]
    P    = V (V^T V + eps I)^-1 V^T            [B, N, N]
    beta = softmax_rows(V V^T)                 [B, N, N], rows indexed by j
    S    = [P Xa | P Xp]                       [B, N, 6]
    out  = f_s(reshape(beta S)) + x_f

Rows of V are the per-location vectors v_i, so the attention logits are
the N x N Gram matrix of locations.

CAM gates an upsampled coarse feature ``x_c`` and a skip feature ``x_s``::

    w = sigmoid(conv(relu(conv(mean_hw(concat(x_c, x_s))))))
    out = w[:C] * x_c + w[C:] * x_s
"""
from __future__ import annotations

import functools

import numpy as np

from .nn import ParamStore, conv1x1, conv_block
from .tensor import (
    ShapeError,
    SingularBasisError,
    Tensor,
    add,
    channel_slice,
    concat_channels,
    conv2d,
    matmul,
    relu,
    reshape,
    scale_channels,
    sigmoid,
    softmax,
    spatial_mean,
    spd_solve,
    sub,
    tikhonov,
    transpose,
)


def _batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    return x, False


def build_basis(xa: Tensor, xp: Tensor, store: ParamStore, name: str, k: int = 16,
                c1: int = 16, kernel: int = 1, training: bool = True) -> Tensor:
    """Shared subspace basis ``V`` of shape ``[B, N, K]`` (or ``[N, K]`` unbatched)."""
    if xa.shape[-2:] != xp.shape[-2:]:
        raise ShapeError("build_basis", "H,W", xp.shape[-2:], xa.shape[-2:])
    xa, single = _batch(xa)
    xp, _ = _batch(xp)
    fa = conv_block(xa, store, name + ".fc_amp", c1, kernel, training)
    fp = conv_block(xp, store, name + ".fc_phase", c1, kernel, training)
    f = conv_block(concat_channels(fa, fp), store, name + ".ff", k, kernel, training)
    b, _, h, w = f.shape
    v = transpose(reshape(f, (b, k, h * w)), (0, 2, 1))
    return reshape(v, v.shape[1:]) if single else v


def orth_project(v: Tensor, eps_reg: float = 1e-6, refine: int = 1) -> Tensor:
    """Orthogonal projector onto span(V): ``V (V^T V + eps I)^-1 V^T``.

    ``eps = eps_reg * trace(V^T V) / K``. Solved through a Cholesky
    factorization; raises :class:`~thzlab.tensor.SingularBasisError` for a
    numerically singular Gram matrix (e.g. V = 0).

    The ridge biases P by about ``eps / lambda_min``. ``refine`` steps of
    iterated Tikhonov, ``Y += (G + eps I)^-1 (V^T - G Y)``, shrink that bias
    to ``(eps / lambda_min) ** (refine + 1)`` while staying bounded on
    rank-deficient V.
    """
    single = v.data.ndim == 2
    if single:
        v = reshape(v, (1,) + v.shape)
    vt = transpose(v, (0, 2, 1))
    gram = matmul(vt, v)
    reg = tikhonov(gram, eps_reg)
    y = spd_solve(reg, vt)
    for _ in range(refine):
        y = add(y, spd_solve(reg, sub(vt, matmul(gram, y))))
    p = matmul(v, y)
    return reshape(p, p.shape[1:]) if single else p


def _safe_project(v: Tensor, eps_reg: float) -> Tensor:
    try:
        return orth_project(v, eps_reg)
    except SingularBasisError:
        if v.data.ndim == 2:
            return Tensor(np.zeros((v.shape[0],) * 2, v.data.dtype))
    # per batch item; concat_channels joins axis -3, the batch axis of [B, N, N]
    parts = []
    for i in range(v.shape[0]):
        vi = channel_slice(v, i, i + 1)
        try:
            parts.append(orth_project(vi, eps_reg))
        except SingularBasisError:
            parts.append(Tensor(np.zeros((1, v.shape[1], v.shape[1]), v.data.dtype)))
    return functools.reduce(concat_channels, parts)


def attention_weights(v: Tensor) -> Tensor:
    """Row-stochastic attention ``beta[j, i] = softmax_i(v_i . v_j)``."""
    perm = (1, 0) if v.data.ndim == 2 else (0, 2, 1)
    return softmax(matmul(v, transpose(v, perm)))


def safm_apply(xa: Tensor, xp: Tensor, beta: Tensor, p: Tensor, x_f: Tensor,
               fs_weight: Tensor, fs_bias: Tensor | None = None) -> Tensor:
    """Project, attend and fuse: ``f_s(beta [P Xa | P Xp]) + x_f``."""
    xa, single = _batch(xa)
    xp, _ = _batch(xp)
    x_f, _ = _batch(x_f)
    if beta.data.ndim == 2:
        beta = reshape(beta, (1,) + beta.shape)
    if p.data.ndim == 2:
        p = reshape(p, (1,) + p.shape)
    b, ca, h, w = xa.shape
    n = h * w
    if p.shape[-1] != n or beta.shape[-1] != n:
        raise ShapeError("safm_apply", "N", p.shape[-1], n)
    pt = transpose(p, (0, 2, 1))
    # channel-first: S^T = [Xa^T P^T ; Xp^T P^T], O^T = S^T beta^T
    sa = matmul(reshape(xa, (b, ca, n)), pt)
    sp = matmul(reshape(xp, (b, xp.shape[1], n)), pt)
    s_t = concat_channels(reshape(sa, (b, ca, n, 1)), reshape(sp, (b, xp.shape[1], n, 1)))
    c_s = s_t.shape[1]
    o_t = matmul(reshape(s_t, (b, c_s, n)), transpose(beta, (0, 2, 1)))
    fused = conv2d(reshape(o_t, (b, c_s, h, w)), fs_weight, fs_bias)
    if fused.shape != x_f.shape:
        raise ShapeError("safm_apply", "C (f_s output)", fused.shape, x_f.shape)
    out = add(fused, x_f)
    return reshape(out, out.shape[1:]) if single else out


def safm(xa: Tensor, xp: Tensor, x_f: Tensor, store: ParamStore, name: str, k: int = 16,
         c1: int = 16, kernel: int = 1, eps_reg: float = 1e-6, training: bool = True) -> Tensor:
    """Full fusion module with parameters drawn from ``store``.

    A batch item whose basis is numerically singular (e.g. all-zero
    spectral inputs) gets a zero projector, so its output reduces to
    ``f_s(0) + x_f``.
    """
    v = build_basis(xa, xp, store, name, k, c1, kernel, training)
    p = _safe_project(v, eps_reg)
    beta = attention_weights(v)
    c = x_f.shape[-3]
    w = store.conv(name + ".fs", c, xa.shape[-3] + xp.shape[-3], 1)
    return safm_apply(xa, xp, beta, p, x_f, w, store.bias(name + ".fs", c))


def cam_pool(x: Tensor) -> Tensor:
    """Global average per channel: ``[.., C, H, W] -> [.., C, 1, 1]``."""
    return spatial_mean(x)


def cam_weights(x_c: Tensor, x_s: Tensor, store: ParamStore, name: str, ratio: int = 4) -> Tensor:
    """Channel weights ``w`` in (0, 1), shape ``[B, C1 + C2, 1, 1]``."""
    cat = concat_channels(x_c, x_s)
    c = cat.shape[-3]
    if c % ratio:
        raise ValueError(f"CAM: {c} channels not divisible by ratio {ratio}")
    g = cam_pool(cat)
    hidden = relu(conv1x1(g, store, name + ".squeeze", c // ratio))
    return sigmoid(conv1x1(hidden, store, name + ".excite", c))


def cam_apply(x_c: Tensor, x_s: Tensor, store: ParamStore, name: str, ratio: int = 4) -> Tensor:
    """``w1 * x_c + w2 * x_s`` with learned per-channel gates."""
    if x_c.shape != x_s.shape:
        raise ShapeError("cam_apply", "C,H,W", x_s.shape, x_c.shape)
    c1 = x_c.shape[-3]
    w = cam_weights(x_c, x_s, store, name, ratio)
    w1 = channel_slice(w, 0, c1)
    w2 = channel_slice(w, c1, w.shape[-3])
    return add(scale_channels(x_c, w1), scale_channels(x_s, w2))
