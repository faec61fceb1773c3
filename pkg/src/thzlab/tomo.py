"""Parallel-beam Radon transform, filtered back-projection and SART.

Geometry (all slices square, N x N, rotation about the image center)::

        y ^          detector axis t at angle theta (counterclockwise from +x)
          |    /
          |   /  t = x cos(theta) + y sin(theta)
          |  /
          | /  theta
    ------+------------> x (columns)
          |
    rows increase downward, so y = (N-1)/2 - row and x = col - (N-1)/2.

At 0 degrees the rays run along columns and the projection is the
column sum. Detector spacing equals the pixel pitch; with the default
``D = N`` bins, objects must lie inside the inscribed circle.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse


@dataclass
class Sinogram:
    data: np.ndarray          # [A, D]
    angles: np.ndarray        # degrees, strictly increasing in [0, 180) for reconstruction
    pixel_pitch: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.angles):
            raise ValueError(f"sinogram data {self.data.shape} does not match {len(self.angles)} angles")
        if len(self.angles) < 1:
            raise ValueError("sinogram needs at least one angle")


@dataclass
class Volume:
    grid: np.ndarray          # [Z, H, W]
    voxel_pitch: float = 1.0


def _check_angles(angles) -> np.ndarray:
    a = np.asarray(angles, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("empty angle list")
    return a


@functools.lru_cache(maxsize=32)
def _system_matrix(n: int, n_det: int, angles: tuple[float, ...]) -> sparse.csr_matrix:
    """Sparse ray-sampling operator with bilinear weights, unit pitch.

    Row ``a * n_det + d`` holds the weights of ray ``d`` at angle ``a``.
    """
    n_s = int(math.ceil(n * math.sqrt(2)))
    if (n_s - n) % 2:
        n_s += 1  # keeps samples on pixel centers at 0 degrees
    s = np.arange(n_s) - (n_s - 1) / 2
    t = np.arange(n_det) - (n_det - 1) / 2
    th = np.deg2rad(np.asarray(angles))
    c, si = np.cos(th)[:, None, None], np.sin(th)[:, None, None]
    tt, ss = t[None, :, None], s[None, None, :]
    x = tt * c - ss * si
    y = tt * si + ss * c
    col = x + (n - 1) / 2
    row = (n - 1) / 2 - y
    r0 = np.floor(row)
    c0 = np.floor(col)
    fr = row - r0
    fc = col - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    ray = (np.arange(len(angles))[:, None, None] * n_det + np.arange(n_det)[None, :, None])
    ray = np.broadcast_to(ray, x.shape)
    rows, cols, vals = [], [], []
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (wgt > 0)
        rows.append(ray[ok])
        cols.append(rr[ok] * n + cc[ok])
        vals.append(wgt[ok])
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * n_det, n * n),
    )
    return mat.tocsr()


def system_matrix(n: int, angles, n_det: int | None = None) -> sparse.csr_matrix:
    a = _check_angles(angles)
    return _system_matrix(n, n_det or n, tuple(float(v) for v in a))


def radon(image: np.ndarray, angles, pixel_pitch: float = 1.0, n_det: int | None = None) -> Sinogram:
    """Line integrals of a square slice (or a stack ``[Z, N, N]``).

    For a stack, ``data`` has shape ``[Z, A, D]`` and a plain array is
    returned instead of a :class:`Sinogram`.
    """
    img = np.asarray(image, dtype=np.float64)
    a = _check_angles(angles)
    n = img.shape[-1]
    if img.shape[-2] != n:
        raise ValueError(f"radon needs square slices, got {img.shape[-2:]}")
    d = n_det or n
    mat = system_matrix(n, a, d)
    if img.ndim == 2:
        return Sinogram((mat @ img.reshape(-1)).reshape(len(a), d) * pixel_pitch, a, pixel_pitch)
    flat = img.reshape(img.shape[0], -1).T
    return (mat @ flat).T.reshape(img.shape[0], len(a), d) * pixel_pitch


def ramlak_kernel(length: int) -> np.ndarray:
    """Discrete Ram-Lak kernel h[n] (unit spacing), n = -length//2 .. length//2 - 1."""
    n = np.arange(-(length // 2), length - length // 2)
    h = np.zeros(length)
    h[n == 0] = 0.25
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd]) ** 2
    return h


def _ramp_response(n_pad: int, window: str) -> np.ndarray:
    k = np.arange(n_pad)
    lag = np.where(k <= n_pad // 2, k, k - n_pad)  # circular lags
    h = np.zeros(n_pad)
    h[lag == 0] = 0.25
    odd = lag % 2 != 0
    h[odd] = -1.0 / (np.pi * lag[odd]) ** 2
    # the DC bin keeps the truncated-kernel sum (~2/(pi^2 n_pad)); forcing it
    # to zero biases reconstructions by a constant offset
    resp = np.real(np.fft.fft(h))
    if window == "hann":
        f = np.fft.fftfreq(n_pad)
        resp = resp * 0.5 * (1 + np.cos(2 * np.pi * f))
    elif window != "none":
        raise ValueError(f"unknown window {window!r}")
    return resp


def ramp_filter(sino: Sinogram, window: str = "none") -> Sinogram:
    """Ram-Lak filtering of each projection, zero-padded to a power of two >= 2D."""
    n_ang, d = sino.data.shape
    if d < 8:
        raise ValueError("ramp_filter needs at least 8 detector bins")
    n_pad = 1 << int(math.ceil(math.log2(2 * d)))
    resp = _ramp_response(n_pad, window)
    spec = np.fft.fft(sino.data, n=n_pad, axis=1)
    out = np.real(np.fft.ifft(spec * resp[None, :], axis=1))[:, :d]
    return Sinogram(out / sino.pixel_pitch, sino.angles.copy(), sino.pixel_pitch)


def backproject(sino: Sinogram, n: int | None = None) -> np.ndarray:
    """Pixel-driven back-projection with linear interpolation on the detector."""
    n_ang, d = sino.data.shape
    n = n or d
    coords = np.arange(n) - (n - 1) / 2
    x = coords[None, :]
    y = -coords[:, None]
    out = np.zeros((n, n))
    det = np.arange(d, dtype=np.float64)
    for row, ang in zip(sino.data, np.deg2rad(sino.angles)):
        u = x * np.cos(ang) + y * np.sin(ang) + (d - 1) / 2
        out += np.interp(u, det, row, left=0.0, right=0.0)
    return out


def fbp(sino: Sinogram, window: str = "none", n: int | None = None) -> np.ndarray:
    filtered = ramp_filter(sino, window)
    return backproject(filtered, n) * (np.pi / len(sino.angles))


def sart(sino: Sinogram, iters: int = 10, relax: float = 0.25, n: int | None = None,
         x0: np.ndarray | None = None, history: list | None = None) -> np.ndarray:
    """Simultaneous algebraic reconstruction, one angle at a time (ascending).

    Each sub-step applies ``x += relax * A_t^T(r / rowsum) / colsum`` with
    the residual ``r`` of that angle's rays; negatives are clamped to zero
    after every full sweep. If ``history`` is a list, the sinogram residual
    norm is appended before the first and after each sweep.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0 < relax <= 1:
        raise ValueError("relax must lie in (0, 1]")
    order = np.argsort(sino.angles, kind="stable")
    n_ang, d = sino.data.shape
    n = n or d
    mat = system_matrix(n, sino.angles, d) * sino.pixel_pitch
    b = sino.data.reshape(-1)
    x = np.zeros(n * n) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    blocks = []
    for a in order:
        sub = mat[a * d:(a + 1) * d]
        rs = np.asarray(sub.sum(axis=1)).ravel()
        cs = np.asarray(sub.sum(axis=0)).ravel()
        blocks.append((sub, b[a * d:(a + 1) * d], np.where(rs > 0, 1 / np.where(rs > 0, rs, 1), 0),
                       np.where(cs > 0, 1 / np.where(cs > 0, cs, 1), 0)))
    if history is not None:
        history.append(float(np.linalg.norm(mat @ x - b)))
    for _ in range(iters):
        for sub, bb, inv_rs, inv_cs in blocks:
            r = (bb - sub @ x) * inv_rs
            x += relax * (sub.T @ r) * inv_cs
        np.maximum(x, 0.0, out=x)
        if history is not None:
            history.append(float(np.linalg.norm(mat @ x - b)))
    return x.reshape(n, n)


def fold_views(views: np.ndarray, angles) -> tuple[np.ndarray, np.ndarray]:
    """Map views at angles >= 180 onto [0, 180) by detector flip; average duplicates.

    views: ``[A, Z, D]``. Returns views sorted by angle.
    """
    a = np.mod(np.asarray(angles, dtype=np.float64), 360.0)
    v = np.array(views, dtype=np.float64, copy=True)
    hi = a >= 180.0
    a[hi] -= 180.0
    v[hi] = v[hi][..., ::-1]
    key = np.round(a, 9)
    uniq = np.unique(key)
    out = np.stack([v[key == u].mean(axis=0) for u in uniq])
    return out, uniq


def reconstruct_volume(views, angles, method: str = "fbp", pixel_pitch: float = 1.0,
                       window: str = "none", iters: int = 10, relax: float = 0.25) -> Volume:
    """Stack per-row reconstructions from a set of 2-D projections.

    Each view is ``[1, Z, D]`` (or ``[Z, D]``); row ``z`` across all views forms
    the sinogram of horizontal slice ``z``.
    """
    arrs = [np.asarray(v, dtype=np.float64) for v in views]
    if not arrs:
        raise ValueError("no views")
    arrs = [a[0] if a.ndim == 3 else a for a in arrs]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs) or len(arrs) != len(np.atleast_1d(angles)):
        raise ValueError("views must share one shape and match the angle list")
    stack, ang = fold_views(np.stack(arrs), angles)
    z, d = shape
    grid = np.empty((z, d, d))
    for r in range(z):
        sino = Sinogram(stack[:, r, :], ang, pixel_pitch)
        if method == "fbp":
            grid[r] = fbp(sino, window)
        elif method == "sart":
            grid[r] = sart(sino, iters=iters, relax=relax)
        else:
            raise ValueError(f"unknown method {method!r}")
    return Volume(grid, pixel_pitch)
