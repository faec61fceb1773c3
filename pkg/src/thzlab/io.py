"""TZT1 tensor container and 16-bit PGM export.

TZT1 layout::

    b"TZT1" | u32 little-endian header length | UTF-8 JSON header | payload

The header is ``{"dtype", "shape", "order": "row-major", "meta"}`` and the
payload holds ``prod(shape)`` little-endian values.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TZT1"
_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u8": "u1", "u16": "<u2"}
_NAMES = {np.dtype(v).str.lstrip("<|"): k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and inf/nan for a JSON header."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def _dtype_name(dt: np.dtype) -> str:
    key = np.dtype(dt).newbyteorder("<").str.lstrip("<|")
    if key not in _NAMES:
        raise FormatError(f"unsupported dtype {dt}")
    return _NAMES[key]


def dumps(x: np.ndarray, meta: dict | None = None) -> bytes:
    x = np.asarray(x)
    name = _dtype_name(x.dtype)
    header = json.dumps({"dtype": name, "shape": list(x.shape), "order": "row-major",
                         "meta": jsonable(meta or {})}, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(x, dtype=_DTYPES[name]).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def loads(buf: bytes) -> tuple[np.ndarray, dict]:
    if buf[:4] != MAGIC:
        raise FormatError("not a TZT1 file (bad magic)")
    if len(buf) < 8:
        raise FormatError("truncated TZT1 header")
    (hlen,) = struct.unpack("<I", buf[4:8])
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad TZT1 header: {e}") from None
    if header.get("order") != "row-major" or header.get("dtype") not in _DTYPES:
        raise FormatError(f"unsupported TZT1 header {header}")
    dt = np.dtype(_DTYPES[header["dtype"]])
    shape = tuple(int(s) for s in header["shape"])
    payload = buf[8 + hlen:]
    if len(payload) != math.prod(shape) * dt.itemsize:
        raise FormatError(f"payload has {len(payload)} bytes, header implies {math.prod(shape) * dt.itemsize}")
    x = np.frombuffer(payload, dtype=dt).reshape(shape)
    return x.astype(dt.newbyteorder("="), copy=True), header["meta"]


def save_tzt(path, x: np.ndarray, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(x, meta))
    return path


def load_tzt(path) -> tuple[np.ndarray, dict]:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# named tensor bundles (checkpoints, projections)
# ---------------------------------------------------------------------------

def save_bundle(path, arrays: dict, meta: dict | None = None, dtype=np.float64) -> Path:
    """Concatenate named arrays into one flat TZT1 payload; names/shapes go to meta."""
    index, flat, off = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype=dtype)
        index.append({"name": name, "shape": list(a.shape), "offset": off})
        flat.append(a.reshape(-1))
        off += a.size
    payload = np.concatenate(flat) if flat else np.zeros(0, dtype)
    return save_tzt(path, payload, {**(meta or {}), "tensors": index})


def load_bundle(path) -> tuple[dict, dict]:
    flat, meta = load_tzt(path)
    out = {}
    for e in meta.pop("tensors"):
        n = math.prod(e["shape"])
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return out, meta


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def export_pgm(x, path) -> Path:
    """Write a [0, 1] image ``[1, H, W]`` or ``[H, W]`` as 16-bit binary PGM (P5)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError("export_pgm takes a single-channel image")
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"export_pgm needs a 2-D image, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("export_pgm values must lie in [0, 1]")
    q = np.round(a * 65535).astype(">u2")
    h, w = q.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (8- or 16-bit) into an integer array."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    dt = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dt, count=w * h).reshape(h, w).astype(np.int64)


def save_projection(path, sp) -> Path:
    """Persist a :class:`~thzlab.physics.SpectralProjection` as one bundle."""
    arrays = {"time_max": sp.time_max, "amplitude": sp.amplitude, "phase": sp.phase, "clean_gt": sp.clean_gt}
    if sp.ranges is not None:
        arrays["ranges"] = sp.ranges
    meta = {"kind": "projection", "view_angle": sp.view_angle, "bands": list(sp.bands), "meta": sp.meta}
    return save_bundle(path, arrays, meta)


def load_projection(path):
    from .physics import SpectralProjection
    arrays, meta = load_bundle(path)
    if meta.get("kind") != "projection":
        raise FormatError(f"{path} is not a projection file")
    return SpectralProjection(arrays["time_max"], arrays["amplitude"], arrays["phase"], arrays["clean_gt"],
                              view_angle=float(meta["view_angle"]), bands=tuple(meta["bands"]),
                              ranges=arrays.get("ranges"), meta=meta.get("meta", {}))
