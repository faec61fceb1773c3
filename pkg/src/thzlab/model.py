"""Multi-scale restoration networks: SARNet and the two U-Net ablation baselines.

Scale ``s`` (1 = finest) runs at ``H / 2**(s-1)`` with
``min(base * 2**(s-1), 8 * base)`` channels.

Encoder: scale 1 is a Conv-block on the Time-max image; scale ``s >= 2``
max-pools the previous feature, fuses it with that scale's amplitude/phase
bands (SAFM) and applies a Conv-block. Decoder: bilinear 2x up + 1x1 conv
to the skip width, CAM(x_c, skip), Conv-block. Head: 1x1 conv + sigmoid.

``unet-base`` drops SAFM and replaces CAM by concatenation;
``unet-ms`` additionally feeds Time-max plus every amplitude band into
the finest scale.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .fusion import cam_apply, safm
from .nn import ParamStore, conv1x1, conv_block
from .physics import PAPER_BANDS_THZ, SpectralProjection
from .tensor import ShapeError, Tensor, concat_channels, downsample2, no_tape, sigmoid, upsample2

VARIANTS = ("sarnet", "unet-base", "unet-ms")


@dataclass
class ModelConfig:
    scales: int = 3
    base_channels: int = 8
    K: int = 16
    c1: int = 16
    L_schedule: tuple[int, int] = (3, 1)   # (trunk Conv-blocks, spectral Conv-blocks)
    bands_per_scale: int = 3
    n_bands: int = 12
    cam_ratio: int = 4
    eps_reg: float = 1e-6
    bn_momentum: float = 0.1
    variant: str = "sarnet"
    dtype: str = "f64"

    def __post_init__(self):
        self.L_schedule = tuple(self.L_schedule)
        if self.scales < 2:
            raise ValueError("scales must be >= 2")
        if self.bands_per_scale * (self.scales - 1) > self.n_bands:
            raise ValueError("not enough bands for bands_per_scale x (scales - 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if any(k not in (1, 3) for k in self.L_schedule):
            raise ValueError("L_schedule entries must be 1 or 3")

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**{"scales": 3, "base_channels": 8, "bands_per_scale": 2, **kw})

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        return cls(**{"scales": 5, "base_channels": 32, **kw})

    def channels(self, s: int) -> int:
        return min(self.base_channels * 2 ** (s - 1), 8 * self.base_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["L_schedule"] = list(self.L_schedule)
        return d

    @property
    def min_divisor(self) -> int:
        return 2 ** (self.scales - 1)


def band_assignment(cfg: ModelConfig) -> list[list[int]]:
    """Band indices per spectral scale (scale 2 first), low frequencies finest.

    The ascending band list is cut into ``scales - 1`` contiguous groups;
    ``bands_per_scale`` evenly spaced bands are taken from each. With 5
    scales and 3 bands per scale this is bands 0-2, 3-5, 6-8, 9-11.
    """
    groups = np.array_split(np.arange(cfg.n_bands), cfg.scales - 1)
    out = []
    for g in groups:
        pick = np.round(np.linspace(0, len(g) - 1, cfg.bands_per_scale)).astype(int)
        out.append([int(g[i]) for i in pick])
    return out


def _as_stack(x) -> np.ndarray:
    if isinstance(x, SpectralProjection):
        x = x.normalized()
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    return x[None] if x.ndim == 3 else x


def band_pyramid(x, cfg: ModelConfig) -> list[tuple[Tensor, Tensor]]:
    """Area-downsampled (amplitude, phase) inputs for scales 2..S.

    ``x`` is a normalized stack ``[B, 1 + 2*n_bands, H, W]`` (or a
    :class:`SpectralProjection`). Scale ``s`` maps are ``H / 2**(s-1)``.
    """
    stack = _as_stack(x)
    h, w = stack.shape[-2:]
    if h % cfg.min_divisor or w % cfg.min_divisor:
        raise ShapeError("band_pyramid", "H,W", (h, w), f"multiple of {cfg.min_divisor}")
    nb = cfg.n_bands
    if stack.shape[1] != 1 + 2 * nb:
        raise ShapeError("band_pyramid", "C", stack.shape[1], 1 + 2 * nb)
    dtype = np.float32 if cfg.dtype == "f32" else np.float64
    out = []
    for s, idx in enumerate(band_assignment(cfg), start=2):
        amp = stack[:, [1 + i for i in idx]]
        ph = stack[:, [1 + nb + i for i in idx]]
        for _ in range(s - 1):
            amp = _area(amp)
            ph = _area(ph)
        out.append((Tensor(amp.astype(dtype)), Tensor(ph.astype(dtype))))
    return out


def _area(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    return a.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def pyramid_bands_thz(cfg: ModelConfig, bands=PAPER_BANDS_THZ) -> list[list[float]]:
    return [[bands[i] for i in idx] for idx in band_assignment(cfg)]


def forward(x, store: ParamStore, cfg: ModelConfig, training: bool = True) -> Tensor:
    """Restore a batch of views; returns ``[B, 1, H, W]`` in [0, 1]."""
    stack = _as_stack(x)
    h, w = stack.shape[-2:]
    if h % cfg.min_divisor or w % cfg.min_divisor:
        raise ShapeError("forward", "H,W", (h, w), f"multiple of {cfg.min_divisor}")
    dtype = np.float32 if cfg.dtype == "f32" else np.float64
    trunk_k, spec_k = cfg.L_schedule
    mom = cfg.bn_momentum
    if cfg.variant == "unet-ms":
        first = stack[:, :1 + cfg.n_bands]
    else:
        first = stack[:, :1]
    e = conv_block(Tensor(first.astype(dtype)), store, "enc1", cfg.channels(1), trunk_k, training, mom)
    skips = [e]
    pyr = band_pyramid(stack, cfg) if cfg.variant == "sarnet" else None
    for s in range(2, cfg.scales + 1):
        x_in = downsample2(e, "maxpool")
        if pyr is not None:
            xa, xp = pyr[s - 2]
            x_in = safm(xa, xp, x_in, store, f"safm{s}", cfg.K, cfg.c1, spec_k, cfg.eps_reg, training)
        e = conv_block(x_in, store, f"enc{s}", cfg.channels(s), trunk_k, training, mom)
        skips.append(e)
    d = e
    for s in range(cfg.scales - 1, 0, -1):
        up = conv1x1(upsample2(d), store, f"up{s}", cfg.channels(s))
        if cfg.variant == "sarnet":
            merged = cam_apply(up, skips[s - 1], store, f"cam{s}", cfg.cam_ratio)
        else:
            merged = concat_channels(up, skips[s - 1])
        d = conv_block(merged, store, f"dec{s}", cfg.channels(s), trunk_k, training, mom)
    return sigmoid(conv1x1(d, store, "head", 1))


def sarnet_forward(x, store: ParamStore, cfg: ModelConfig, training: bool = True) -> Tensor:
    if cfg.variant != "sarnet":
        raise ValueError("sarnet_forward needs variant='sarnet'")
    return forward(x, store, cfg, training)


def unet_baseline_forward(x, store: ParamStore, cfg: ModelConfig, training: bool = True) -> Tensor:
    if cfg.variant not in ("unet-base", "unet-ms"):
        raise ValueError("unet_baseline_forward needs a unet variant")
    return forward(x, store, cfg, training)


def init_model(cfg: ModelConfig, seed: int = 0, size: int | None = None) -> ParamStore:
    """Create every parameter by tracing one forward pass on a dummy input."""
    store = ParamStore(seed, cfg.dtype)
    size = size or max(8 * cfg.min_divisor // 2, 2 * cfg.min_divisor)
    rng = np.random.default_rng(seed + 1)
    dummy = rng.uniform(size=(2, 1 + 2 * cfg.n_bands, size, size))
    with no_tape():
        forward(dummy, store, cfg, training=True)
    # the tracing pass must not leave its statistics behind
    for st in store.bn.values():
        st.mean[...] = 0.0
        st.var[...] = 1.0
    store.frozen = True
    return store


def parameter_count(cfg: ModelConfig) -> int:
    return init_model(cfg).count()
