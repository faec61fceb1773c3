"""Synthetic THz-TDS measurements of voxel phantoms.

A transmitted pulse through a pixel's ray is the reference pulse delayed by
the excess optical path and attenuated by the integrated field absorption::

    E(t) = exp(-int alpha dl) * E_ref(t - int (n - 1) dl / c)

From each trace we take the Time-max feature (absolute peak) and the
complex spectrum at the selected bands. Units: mm, ps, THz.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import tomo

C_MM_PER_PS = 0.299792458
DT_PS = 0.1
PULSE_SIGMA_PS = 0.3
PULSE_T0_PS = 3.0
MIN_TRACE_LEN = 256
VOXEL_PITCH_MM = 0.25

PAPER_BANDS_THZ = (0.380, 0.448, 0.557, 0.621, 0.916, 0.970,
                   0.988, 1.097, 1.113, 1.163, 1.208, 1.229)


@dataclass(frozen=True)
class Material:
    n: float
    alpha: float  # field absorption, 1/mm

    def __post_init__(self):
        if not 1.0 <= self.n <= 4.0:
            raise ValueError(f"refractive index {self.n} outside [1, 4]")
        if not 0.0 <= self.alpha <= 10.0:
            raise ValueError(f"absorption {self.alpha} outside [0, 10] 1/mm")


VACUUM = Material(1.0, 0.0)
HIPS = Material(1.55, 0.05)


@dataclass(frozen=True)
class BandTable:
    frequencies: tuple[float, ...] = PAPER_BANDS_THZ

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        if f.size == 0 or np.any(np.diff(f) <= 0):
            raise ValueError("band frequencies must be non-empty and strictly ascending")
        if f.min() < 0.3 or f.max() > 1.3:
            raise ValueError("band frequencies must lie within [0.3, 1.3] THz")

    def __len__(self):
        return len(self.frequencies)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.frequencies, dtype=float)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

@dataclass
class Phantom:
    """Voxel grid ``[Z, Y, X]`` of refractive index and field absorption.

    Z is the vertical (rotation) axis; Y and X span the square horizontal slice.
    """

    n: np.ndarray
    alpha: np.ndarray
    voxel_pitch: float = VOXEL_PITCH_MM
    kind: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        if self.n.shape != self.alpha.shape or self.n.ndim != 3:
            raise ValueError("phantom n/alpha must be matching 3-D grids")
        if self.n.shape[1] != self.n.shape[2]:
            raise ValueError("horizontal slices must be square")
        if np.any(self.n < 1) or np.any(self.alpha < 0):
            raise ValueError("phantom needs n >= 1 and alpha >= 0 everywhere")

    @property
    def shape(self):
        return self.n.shape

    @property
    def support(self) -> np.ndarray:
        return (self.n != 1.0) | (self.alpha > 0)


PHANTOM_KINDS = ("disk", "bars", "blob-composite", "procedural-seeded")


def _grid(size):
    z, y, x = size
    zz = np.arange(z)[:, None, None] - (z - 1) / 2
    yy = np.arange(y)[None, :, None] - (y - 1) / 2
    xx = np.arange(x)[None, None, :] - (x - 1) / 2
    return zz, yy, xx


def make_phantom(kind: str, size, materials=(HIPS,), seed: int = 0, **params) -> Phantom:
    """Build a phantom of one of :data:`PHANTOM_KINDS`.

    ``size`` is an int (cube) or ``(Z, Y, X)`` with ``Y == X``. Objects stay
    inside the inscribed cylinder of the horizontal slice. An empty
    ``materials`` list yields an all-vacuum grid.
    """
    if isinstance(size, (int, np.integer)):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 8 or size[1] != size[2]:
        raise ValueError(f"degenerate phantom size {size}")
    if isinstance(materials, Material):
        materials = (materials,)
    materials = tuple(materials)
    n = np.ones(size)
    alpha = np.zeros(size)
    if not materials:
        return Phantom(n, alpha, kind=kind, seed=seed)
    rng = np.random.default_rng(seed)
    zz, yy, xx = _grid(size)
    half = size[1] / 2
    rmax = 0.9 * half  # radius of the usable cylinder, pixels

    def paint(mask, mat):
        n[mask] = mat.n
        alpha[mask] = mat.alpha

    if kind == "disk":
        r = params.get("radius", 0.3 * size[1])
        cy, cx = params.get("center", (0.0, 0.0))
        paint(np.broadcast_to((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2, size), materials[0])
    elif kind == "bars":
        count = params.get("count", int(rng.integers(2, 5)))
        width = rmax * 2 / (2 * count + 1)
        height = rng.uniform(0.5, 0.9) * rmax
        for i in range(count):
            x0 = -rmax + width * (2 * i + 1) + rng.uniform(-0.3, 0.3) * width
            zlim = rng.uniform(0.4, 0.85) * size[0] / 2
            mask = (np.abs(xx - x0 - width / 2) <= width / 2) & (np.abs(yy) <= height / 2) & (np.abs(zz) <= zlim)
            mask &= yy ** 2 + xx ** 2 <= rmax ** 2
            paint(mask, materials[i % len(materials)])
    elif kind == "blob-composite":
        count = params.get("count", int(rng.integers(2, 5)))
        for i in range(count):
            r = rng.uniform(0.2, 0.4) * rmax
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0, rmax - r)
            cy, cx = rad * np.sin(ang), rad * np.cos(ang)
            cz = rng.uniform(-0.4, 0.4) * size[0]
            axes = r * rng.uniform(0.7, 1.3, size=3)
            axes[0] = rng.uniform(0.8, 1.6) * r
            mask = ((zz - cz) / axes[0]) ** 2 + ((yy - cy) / axes[1]) ** 2 + ((xx - cx) / axes[2]) ** 2 <= 1
            paint(mask, materials[i % len(materials)])
    elif kind == "procedural-seeded":
        count = params.get("count", int(rng.integers(3, 7)))
        for i in range(count):
            shape = rng.integers(0, 3)
            r = rng.uniform(0.15, 0.35) * rmax
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0, rmax - 1.5 * r)
            cy, cx = rad * np.sin(ang), rad * np.cos(ang)
            z0, z1 = sorted(rng.uniform(-0.45, 0.45, size=2) * size[0])
            zmask = (zz >= z0 - 2) & (zz <= z1 + 2)
            if shape == 0:
                mask = zmask & ((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2)
            elif shape == 1:
                mask = zmask & (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.6 * r)
            else:
                cz = 0.5 * (z0 + z1)
                mask = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= (1.2 * r) ** 2
            paint(mask, materials[int(rng.integers(len(materials)))])
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    ph = Phantom(n, alpha, kind=kind, seed=seed)
    if not ph.support.any():
        raise ValueError(f"phantom {kind!r} with seed {seed} came out empty")
    return ph


# ---------------------------------------------------------------------------
# ray integrals
# ---------------------------------------------------------------------------

@dataclass
class PathMaps:
    """Per-pixel line integrals of one view, each ``[Z, D]`` (mm or dimensionless)."""

    thickness: np.ndarray    # int 1[object] dl, mm
    optical: np.ndarray      # int (n - 1) dl, mm
    absorption: np.ndarray   # int alpha dl
    view_angle: float = 0.0

    @property
    def delay_ps(self) -> np.ndarray:
        return self.optical / C_MM_PER_PS

    def silhouette(self, pitch: float = VOXEL_PITCH_MM) -> np.ndarray:
        # half a voxel of thickness trims the bilinear fringe around the support
        return (self.thickness >= 0.5 * pitch).astype(np.float64)


def path_integrals(phantom: Phantom, view_angle: float | np.ndarray):
    """Parallel-beam integrals through each horizontal slice (uses :func:`tomo.radon`).

    Returns a :class:`PathMaps` for a scalar angle, or a list for an array.
    """
    angles = np.atleast_1d(np.asarray(view_angle, dtype=float))
    p = phantom.voxel_pitch
    thick = tomo.radon(phantom.support.astype(float), angles, pixel_pitch=p)
    opt = tomo.radon(phantom.n - 1.0, angles, pixel_pitch=p)
    absn = tomo.radon(phantom.alpha, angles, pixel_pitch=p)
    # radon on a stack gives [Z, A, D]
    maps = [PathMaps(np.maximum(thick[:, a], 0), np.maximum(opt[:, a], 0), np.maximum(absn[:, a], 0),
                     float(angles[a])) for a in range(len(angles))]
    return maps[0] if np.ndim(view_angle) == 0 else maps


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass
class TimeTrace:
    samples: np.ndarray
    dt: float = DT_PS

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.samples.shape[-1]) * self.dt


def pulse_shape(t: np.ndarray, t0: float = PULSE_T0_PS, sigma: float = PULSE_SIGMA_PS) -> np.ndarray:
    """Differentiated Gaussian with unit absolute peak (at t0 -/+ sigma)."""
    u = (np.asarray(t) - t0) / sigma
    return -u * np.exp(0.5 - 0.5 * u * u)


def trace_length(max_delay_ps: float = 0.0, dt: float = DT_PS) -> int:
    need = PULSE_T0_PS + max_delay_ps + 6 * PULSE_SIGMA_PS + 2.0
    return max(MIN_TRACE_LEN, int(np.ceil(need / dt)))


def reference_trace(n_samples: int = MIN_TRACE_LEN, dt: float = DT_PS) -> TimeTrace:
    return TimeTrace(pulse_shape(np.arange(n_samples) * dt), dt)


def _noise_std(snr_db: float) -> float:
    if snr_db is None or np.isinf(snr_db):
        return 0.0
    if snr_db <= 0:
        raise ValueError("snr_db must be positive")
    return 10 ** (-snr_db / 20)


def synth_traces(optical_mm, absorption, n_samples: int | None = None, snr_db: float = 20.0,
                 rng: np.random.Generator | None = None, dt: float = DT_PS) -> np.ndarray:
    """Vectorized transmitted traces ``[..., T]`` for arrays of path integrals.

    Noise is white Gaussian with standard deviation ``10**(-snr_db/20)`` times
    the reference peak (unit); ``snr_db=inf`` disables it.
    """
    std = _noise_std(snr_db)
    optical_mm = np.asarray(optical_mm, dtype=float)
    absorption = np.asarray(absorption, dtype=float)
    delay = optical_mm / C_MM_PER_PS
    if n_samples is None:
        n_samples = trace_length(float(np.max(delay, initial=0.0)), dt)
    t = np.arange(n_samples) * dt
    tr = np.exp(-absorption)[..., None] * pulse_shape(t - delay[..., None])
    if std:
        rng = rng or np.random.default_rng()
        tr = tr + std * rng.standard_normal(tr.shape)
    return tr


def synth_trace(maps: PathMaps, pixel: tuple[int, int], band_table: BandTable | None = None,
                snr_db: float = 20.0, rng: np.random.Generator | None = None,
                n_samples: int | None = None) -> TimeTrace:
    """Trace of a single detector pixel ``(row, col)`` of ``maps``."""
    r, c = pixel
    samples = synth_traces(maps.optical[r, c], maps.absorption[r, c], n_samples=n_samples,
                           snr_db=snr_db, rng=rng)
    return TimeTrace(samples)


def slab_trace(n: float, d_mm: float, alpha: float = 0.0, snr_db: float = np.inf,
               n_samples: int | None = None, rng=None) -> TimeTrace:
    """Trace through a homogeneous slab of index ``n`` and thickness ``d_mm``."""
    return TimeTrace(synth_traces((n - 1) * d_mm, alpha * d_mm, n_samples=n_samples,
                                  snr_db=snr_db, rng=rng))


def time_max(trace, refine: bool = True):
    """Absolute peak of the trace(s) along the last axis.

    With ``refine`` the peak is located by a three-point parabola through
    the largest sample and its circular neighbours, which removes the
    sub-sample sampling loss of a plain ``max``.
    """
    x = trace.samples if isinstance(trace, TimeTrace) else np.asarray(trace, dtype=float)
    if x.shape[-1] == 0:
        raise ValueError("empty trace")
    a = np.abs(x)
    i = np.argmax(a, axis=-1)[..., None]
    y0 = np.take_along_axis(a, i, axis=-1)[..., 0]
    if not refine or x.shape[-1] < 3:
        return y0
    n = x.shape[-1]
    ym = np.take_along_axis(a, (i - 1) % n, axis=-1)[..., 0]
    yp = np.take_along_axis(a, (i + 1) % n, axis=-1)[..., 0]
    curv = ym - 2 * y0 + yp
    safe = np.where(curv < 0, curv, -1.0)
    delta = 0.5 * (ym - yp) / safe
    peak = y0 - 0.25 * (ym - yp) * delta
    return np.where(curv < 0, peak, y0)


def _nyquist_check(freqs, dt):
    if np.max(freqs) >= 0.5 / dt:
        raise ValueError(f"band {np.max(freqs)} THz at or above Nyquist {0.5 / dt} THz")


def spectrum_at(samples, freqs, dt: float = DT_PS) -> np.ndarray:
    """Direct single-frequency transforms ``sum_k E(t_k) exp(-i 2 pi f t_k) dt``.

    Exact evaluation of the DTFT, i.e. the limit of unbounded zero padding,
    so any frequency spacing is available without a full transform.
    """
    samples = np.asarray(samples, dtype=float)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    _nyquist_check(freqs, dt)
    t = np.arange(samples.shape[-1]) * dt
    basis = np.exp(-2j * np.pi * t[:, None] * freqs[None, :]) * dt
    return samples @ basis


def _wrap(phi):
    # (-pi, pi]
    return np.pi - np.mod(np.pi - phi, 2 * np.pi)


def extract_bands(trace, band_table: BandTable | np.ndarray, reference: TimeTrace | None = None,
                  unwrap: bool = False):
    """Amplitude and relative phase at each band.

    ``amp = |X(f)|``; ``phase`` is the phase delay relative to the reference
    pulse, ``arg(R(f) / X(f))``, wrapped to (-pi, pi] (positive for a
    delayed pulse). ``unwrap=True`` unwraps along a fine frequency grid
    from 0.02 THz for diagnostics.
    """
    x = trace.samples if isinstance(trace, TimeTrace) else np.asarray(trace, dtype=float)
    dt = trace.dt if isinstance(trace, TimeTrace) else DT_PS
    freqs = band_table.array if isinstance(band_table, BandTable) else np.atleast_1d(band_table)
    n = x.shape[-1]
    ref = reference.samples if reference is not None else pulse_shape(np.arange(n) * dt)
    _nyquist_check(freqs, dt)
    if not unwrap:
        xs = spectrum_at(x, freqs, dt)
        rs = spectrum_at(ref, freqs, dt)
        return np.abs(xs), _wrap(np.angle(rs * np.conj(xs)))
    fmax = float(np.max(freqs))
    grid = np.unique(np.concatenate([np.arange(0.02, fmax, 0.005), freqs]))
    xs = spectrum_at(x, grid, dt)
    rs = spectrum_at(ref, grid, dt)
    ph = np.unwrap(np.angle(rs * np.conj(xs)), axis=-1)
    idx = np.searchsorted(grid, freqs)
    return np.abs(xs[..., idx]), ph[..., idx]


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

@dataclass
class SpectralProjection:
    """One view: Time-max, per-band amplitude and phase, clean target.

    Physical units: ``time_max`` and ``amplitude`` relative to the vacuum
    reference (so in (0, 1] without noise), ``phase`` wrapped phase delay in
    radians. ``ranges`` holds the (min, max) per channel used by
    :meth:`normalized`; the default is the physical range.
    """

    time_max: np.ndarray      # [1, H, W]
    amplitude: np.ndarray     # [B, H, W]
    phase: np.ndarray         # [B, H, W]
    clean_gt: np.ndarray      # [1, H, W]
    view_angle: float = 0.0
    bands: tuple[float, ...] = PAPER_BANDS_THZ
    ranges: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_bands(self) -> int:
        return self.amplitude.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.time_max.shape[-2:]

    def channels(self) -> np.ndarray:
        return np.concatenate([self.time_max, self.amplitude, self.phase], axis=0)

    def default_ranges(self) -> np.ndarray:
        b = self.n_bands
        lo = np.concatenate([[0.0], np.zeros(b), np.full(b, -np.pi)])
        hi = np.concatenate([[1.0], np.ones(b), np.full(b, np.pi)])
        return np.stack([lo, hi], axis=1)

    def normalized(self) -> np.ndarray:
        """``[1 + 2B, H, W]`` scaled to [0, 1] by ``ranges`` (values clipped)."""
        rg = self.ranges if self.ranges is not None else self.default_ranges()
        lo, hi = rg[:, 0][:, None, None], rg[:, 1][:, None, None]
        return np.clip((self.channels() - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0, 1.0)

    def denormalize(self, stack: np.ndarray) -> np.ndarray:
        rg = self.ranges if self.ranges is not None else self.default_ranges()
        lo, hi = rg[:, 0][:, None, None], rg[:, 1][:, None, None]
        return stack * (hi - lo) + lo

    def flipped(self) -> "SpectralProjection":
        """Horizontal (detector) flip: the same view seen from angle + 180."""
        f = lambda a: a[..., ::-1].copy()
        return replace(self, time_max=f(self.time_max), amplitude=f(self.amplitude),
                       phase=f(self.phase), clean_gt=f(self.clean_gt),
                       view_angle=(self.view_angle + 180.0) % 360.0, meta=dict(self.meta))


def fit_ranges(samples) -> np.ndarray:
    """Per-channel (min, max) over a training split; freeze and assign to every split."""
    stacks = [s.channels() for s in samples]
    lo = np.min([s.min(axis=(1, 2)) for s in stacks], axis=0)
    hi = np.max([s.max(axis=(1, 2)) for s in stacks], axis=0)
    return np.stack([lo, hi], axis=1)


def psf_sigma_px(freq_thz, k: float = 0.5, pitch_mm: float = VOXEL_PITCH_MM):
    """Gaussian PSF width in pixels, proportional to the wavelength."""
    return k * (C_MM_PER_PS / np.asarray(freq_thz, dtype=float)) / pitch_mm


PULSE_PEAK_THZ = 1.0 / (2 * np.pi * PULSE_SIGMA_PS)


@dataclass
class DegradeParams:
    psf_k: float = 0.5
    snr_db: float = 20.0
    water_lines: dict = field(default_factory=dict)   # THz -> extra field transmission factor
    pitch_mm: float = VOXEL_PITCH_MM


def _add_noise(img: np.ndarray, snr_db: float, rng) -> np.ndarray:
    std = _noise_std(snr_db)
    if not std:
        return img
    rms = np.sqrt(np.mean(img ** 2))
    return img + std * rms * rng.standard_normal(img.shape)


def degrade(maps: PathMaps, band_table: BandTable = BandTable(), params: DegradeParams = DegradeParams(),
            rng: np.random.Generator | None = None) -> SpectralProjection:
    """Measured view of a pixel grid of ray integrals.

    Per pixel: synthesize the noiseless trace, take Time-max and the complex
    band transmission ``X(f) / R(f)``. Then per band: optional water-line
    attenuation, Gaussian blur of the complex field with ``sigma ~ c/f``,
    and additive image noise at ``snr_db``. Time-max is blurred at the
    reference pulse's peak frequency.
    """
    rng = rng or np.random.default_rng()
    freqs = band_table.array
    h, w = maps.optical.shape
    sig_b = psf_sigma_px(freqs, params.psf_k, params.pitch_mm)
    sig_t = float(psf_sigma_px(PULSE_PEAK_THZ, params.psf_k, params.pitch_mm))
    limit = min(h, w) / 4
    if max(sig_b.max(), sig_t) > limit:
        raise ValueError(f"PSF sigma {max(sig_b.max(), sig_t):.2f} px exceeds image size / 4 = {limit}")

    traces = synth_traces(maps.optical, maps.absorption, snr_db=np.inf)
    n_t = traces.shape[-1]
    ref = pulse_shape(np.arange(n_t) * DT_PS)
    tm = time_max(traces) / time_max(ref)
    trans = spectrum_at(traces, freqs) / spectrum_at(ref, freqs)  # [H, W, B]
    trans = np.moveaxis(trans, -1, 0)
    for b, f in enumerate(freqs):
        for line, factor in params.water_lines.items():
            if abs(float(line) - f) < 1e-9:
                trans[b] *= factor

    if params.psf_k > 0:
        tm = ndimage.gaussian_filter(tm, sig_t, mode="nearest")
        for b in range(len(freqs)):
            trans[b] = (ndimage.gaussian_filter(trans[b].real, sig_b[b], mode="nearest")
                        + 1j * ndimage.gaussian_filter(trans[b].imag, sig_b[b], mode="nearest"))

    amp = np.abs(trans)
    phase = _wrap(-np.angle(trans))
    tm = _add_noise(tm, params.snr_db, rng)
    amp = np.stack([_add_noise(a, params.snr_db, rng) for a in amp])
    phase = _wrap(np.stack([_add_noise(p, params.snr_db, rng) for p in phase]))
    return SpectralProjection(
        time_max=tm[None], amplitude=amp, phase=phase,
        clean_gt=maps.silhouette(params.pitch_mm)[None],
        view_angle=maps.view_angle, bands=tuple(band_table.frequencies),
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    scale: float = 1.0
    flip_h: bool = False
    flip_v: bool = False
    crop_y: float = 0.5   # fractional crop offsets in [0, 1]
    crop_x: float = 0.5

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            brightness=rng.uniform(0.8, 1.2),
            contrast=rng.uniform(0.8, 1.2),
            saturation=rng.uniform(0.8, 1.2),
            scale=rng.uniform(0.5, 1.5),
            flip_h=bool(rng.integers(2)),
            flip_v=bool(rng.integers(2)),
            crop_y=rng.uniform(),
            crop_x=rng.uniform(),
        )


def augment(sample: SpectralProjection, seed: int | None = None, crop: int = 128,
            params: AugmentParams | None = None) -> SpectralProjection:
    """Random photometric + geometric augmentation followed by a square crop.

    Geometric steps (scale, flips, crop) act identically on every channel and
    on ``clean_gt``; brightness/contrast/saturation touch only the Time-max and
    amplitude channels (a brightness shift of wrapped phase is not a phase).
    The scale factor is raised as needed so the crop fits.
    """
    if params is None:
        params = AugmentParams.draw(np.random.default_rng(seed))
    h, w = sample.shape
    if min(h, w) < crop:
        raise ValueError(f"sample {h}x{w} smaller than crop {crop}")
    b = sample.n_bands
    meas = np.concatenate([sample.time_max, sample.amplitude])
    meas = meas * params.brightness
    meas = (meas - meas.mean(axis=(1, 2), keepdims=True)) * params.contrast + meas.mean(axis=(1, 2), keepdims=True)
    gray = meas.mean(axis=0, keepdims=True)
    meas = gray + params.saturation * (meas - gray)
    stack = np.concatenate([meas, sample.phase, sample.clean_gt])

    s = max(params.scale, crop / min(h, w))
    if s != 1.0:
        stack = np.stack([ndimage.zoom(c, s, order=1, mode="nearest", grid_mode=True) for c in stack])
    if params.flip_h:
        stack = stack[..., ::-1]
    if params.flip_v:
        stack = stack[..., ::-1, :]
    hh, ww = stack.shape[-2:]
    y0 = int(round(params.crop_y * (hh - crop)))
    x0 = int(round(params.crop_x * (ww - crop)))
    stack = np.ascontiguousarray(stack[:, y0:y0 + crop, x0:x0 + crop])
    angle = (sample.view_angle + 180.0) % 360.0 if params.flip_h else sample.view_angle
    return replace(sample, time_max=stack[:1], amplitude=stack[1:1 + b], phase=stack[1 + b:1 + 2 * b],
                   clean_gt=stack[1 + 2 * b:], view_angle=angle, meta=dict(sample.meta))
