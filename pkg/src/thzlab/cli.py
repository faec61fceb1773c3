"""Command-line pipeline: phantom -> simulate -> dataset -> train -> restore -> reconstruct -> eval.

Each command reads ``--config run.json`` (optional; defaults otherwise) plus
``--set section.key=value`` overrides. Generating commands require
``--seed``. Errors exit nonzero with one JSON object on stderr:
2 config, 3 numeric, 4 I/O.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, apply_overrides
from .gradcheck import grad_check
from .metrics import psnr, ssim
from .physics import (
    BandTable,
    DegradeParams,
    Material,
    Phantom,
    degrade,
    make_phantom,
    path_integrals,
)
from .tensor import NonFiniteError, SingularBasisError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    code = EXIT_CONFIG


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(io.jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def _load_cfg(args) -> RunConfig:
    base = RunConfig().to_dict()
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
    d = apply_overrides(base, args.set or [])
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    cfg = RunConfig.from_dict(d)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _need_seed(cfg: RunConfig):
    if cfg.seed is None:
        raise ConfigError("this command generates data and needs --seed")


def _views(dir_or_files) -> list[Path]:
    p = Path(dir_or_files)
    files = sorted(p.glob("view_*.tzt")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no view_*.tzt files in {p}")
    return files


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> dict:
    _need_seed(cfg)
    spec = cfg.phantom
    ph = make_phantom(spec.kind, spec.size, materials=(Material(spec.n, spec.alpha),), seed=cfg.seed)
    out = Path(cfg.out_dir) / "phantom.tzt"
    io.save_tzt(out, np.stack([ph.n, ph.alpha]),
                {"kind": "phantom", "phantom_kind": ph.kind, "seed": cfg.seed, "voxel_pitch": ph.voxel_pitch})
    return {"phantom": str(out), "shape": list(ph.shape)}


def _read_phantom(path) -> Phantom:
    arr, meta = io.load_tzt(path)
    if meta.get("kind") != "phantom":
        raise io.FormatError(f"{path} is not a phantom file")
    return Phantom(arr[0], arr[1], voxel_pitch=meta["voxel_pitch"], kind=meta["phantom_kind"], seed=meta["seed"])


def cmd_simulate(args, cfg: RunConfig) -> dict:
    _need_seed(cfg)
    sim = cfg.sim
    if args.angles is not None:
        sim.angles = args.angles
    if args.step is not None:
        sim.step_deg = args.step
    ph = _read_phantom(args.phantom or Path(cfg.out_dir) / "phantom.tzt")
    angles = np.arange(sim.angles) * sim.step_deg
    params = DegradeParams(psf_k=sim.psf_k, snr_db=sim.snr_db, water_lines=sim.water_lines,
                           pitch_mm=ph.voxel_pitch)
    bands = BandTable(tuple(sim.bands_thz))
    maps = path_integrals(ph, angles)
    out_dir = Path(cfg.out_dir) / "views"
    out_dir.mkdir(parents=True, exist_ok=True)
    views = []
    for i, m in enumerate(maps):
        rng = np.random.default_rng([cfg.seed, i])   # one stream per view
        sp = degrade(m, bands, params, rng)
        views.append(sp)
        if sim.flip_augment:
            views.append(sp.flipped())
    for k, sp in enumerate(views):
        io.save_projection(out_dir / f"view_{k:03d}.tzt", sp)
    return {"views": len(views), "dir": str(out_dir), "angles": [v.view_angle for v in views]}


def cmd_dataset(args, cfg: RunConfig) -> dict:
    _need_seed(cfg)
    from .train import DataConfig, leave_one_family_out
    ds = cfg.dataset
    dcfg = DataConfig(families=tuple(ds.families), size=ds.size, psf_k=cfg.sim.psf_k, snr_db=cfg.sim.snr_db)
    split = leave_one_family_out(ds.held_out, cfg.seed, ds.n_train, ds.n_val, ds.n_test, dcfg)
    root = Path(cfg.out_dir) / "dataset"
    manifest = {"held_out": split.held_out, "seed": cfg.seed, "ranges": split.ranges.tolist()}
    for name in ("train", "val", "test"):
        files = []
        for i, sp in enumerate(getattr(split, name)):
            f = io.save_projection(root / name / f"view_{i:04d}.tzt", sp)
            files.append(str(f.relative_to(root)))
        manifest[name] = files
    _write_json(root / "manifest.json", manifest)
    return {"dataset": str(root), **{k: len(manifest[k]) for k in ("train", "val", "test")}}


def _load_split(root: Path):
    from .train import Split
    man = json.loads((root / "manifest.json").read_text())
    parts = {k: [io.load_projection(root / f) for f in man[k]] for k in ("train", "val", "test")}
    return Split(parts["train"], parts["val"], parts["test"], man["held_out"], np.asarray(man["ranges"]))


def cmd_train(args, cfg: RunConfig) -> dict:
    _need_seed(cfg)
    from .train import TrainConfig, run_summary, save_checkpoint, train
    root = Path(args.dataset or Path(cfg.out_dir) / "dataset")
    split = _load_split(root)
    t = cfg.train
    ckpt = Path(cfg.out_dir) / "model.tzt"
    log = Path(cfg.out_dir) / "train_log.jsonl"
    res = train(split, cfg.model, TrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr, decay=t.decay,
                                              decay_every=t.decay_every, seed=cfg.seed, log_path=str(log)))
    res.store.load_arrays(res.best_store_arrays)
    save_checkpoint(ckpt, res.store, cfg.model, res.opt, res.best_epoch, split.ranges)
    return {"checkpoint": str(ckpt), "log": str(log), **run_summary(res)}


def cmd_restore(args, cfg: RunConfig) -> dict:
    from .train import load_checkpoint, predict
    store, mcfg, meta = load_checkpoint(args.checkpoint or Path(cfg.out_dir) / "model.tzt")
    ranges = None if meta.get("ranges") is None else np.asarray(meta["ranges"])
    out_dir = Path(cfg.out_dir) / "restored"
    files = _views(args.views or Path(cfg.out_dir) / "views")
    for f in files:
        sp = io.load_projection(f)
        sp.ranges = ranges
        y = predict(store, mcfg, sp.normalized()[None])[0]
        io.save_tzt(out_dir / f.name, y, {"kind": "image", "view_angle": sp.view_angle, "source": f.name})
        if args.pgm:
            io.export_pgm(y, out_dir / (f.stem + ".pgm"))
    return {"restored": len(files), "dir": str(out_dir)}


def _read_image(path) -> tuple[np.ndarray, float]:
    """Image ``[1, H, W]`` and its angle from a restored image or a projection (its GT)."""
    arr, meta = io.load_tzt(path)
    if meta.get("kind") == "image":
        return arr, float(meta["view_angle"])
    sp = io.load_projection(path)
    return sp.clean_gt, sp.view_angle


def cmd_reconstruct(args, cfg: RunConfig) -> dict:
    from .tomo import reconstruct_volume
    files = _views(args.views or Path(cfg.out_dir) / "restored")
    imgs, angles = zip(*(_read_image(f) for f in files))
    t = cfg.tomo
    pitch = float(args.pitch)
    vol = reconstruct_volume(list(imgs), list(angles), method=t.method, pixel_pitch=pitch,
                             window=t.window, iters=t.sart_iters, relax=t.sart_relax)
    out = Path(cfg.out_dir) / "volume.tzt"
    io.save_tzt(out, vol.grid, {"kind": "volume", "voxel_pitch": pitch, "method": t.method,
                                "angles": sorted(set(a % 180.0 for a in angles))})
    return {"volume": str(out), "shape": list(vol.grid.shape)}


def cmd_eval(args, cfg: RunConfig) -> dict:
    pred = _views(args.pred)
    gt_dir = Path(args.gt)
    rows = []
    for f in pred:
        x, ang = _read_image(f)
        y, _ = _read_image(gt_dir / f.name if gt_dir.is_dir() else gt_dir)
        rows.append({"view": f.name, "angle": ang, "psnr": psnr(x, y), "ssim": ssim(x, y)})
    agg = {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))}
    table = {"object": args.name, "views": rows, "mean": agg}
    out = Path(cfg.out_dir) / "metrics.json"
    _write_json(out, table)
    return {"metrics": str(out), "object": args.name, **agg}


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    reports = [r.to_dict() for r in standard_gradchecks(seed=args.seed or 0, include_model=not args.quick)]
    out = Path(cfg.out_dir) / "gradcheck.json"
    _write_json(out, reports)
    failed = [r["name"] for r in reports if not r["passed"]]
    if failed:
        raise NonFiniteError(f"gradient check failed for {failed}")
    return {"gradcheck": str(out), "checked": len(reports), "failed": failed}


def standard_gradchecks(seed: int = 0, include_model: bool = True) -> list:
    """grad_check every differentiable op plus the composed modules (f64)."""
    from . import fusion, nn, tensor as T
    from .model import ModelConfig, forward, init_model
    rng = np.random.default_rng(seed)

    def t(*shape, pos=False):
        a = rng.uniform(0.5, 1.5, shape) if pos else rng.standard_normal(shape)
        return T.Tensor(a, requires_grad=True)

    spd = rng.standard_normal((3, 5, 5))
    spd = T.Tensor(spd @ spd.transpose(0, 2, 1) + 5 * np.eye(5), requires_grad=True)
    st = nn.ParamStore(seed)
    checks = [
        ("add", T.add, [t(2, 3), t(2, 3)]),
        ("sub", T.sub, [t(2, 3), t(2, 3)]),
        ("mul", T.mul, [t(2, 3), t(2, 3)]),
        ("scale", lambda a: T.scale(a, 1.7), [t(4)]),
        ("relu", T.relu, [T.Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.1, 1, (3, 4)), True)]),
        ("sigmoid", T.sigmoid, [t(3, 4)]),
        ("mse", T.mse, [t(3, 4), t(3, 4)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [t(3, 4)]),
        ("transpose", lambda a: T.transpose(a, (1, 0)), [t(3, 4)]),
        ("concat_channels", T.concat_channels, [t(2, 3, 4), t(1, 3, 4)]),
        ("channel_slice", lambda a: T.channel_slice(a, 1, 3), [t(4, 3, 3)]),
        ("matmul", T.matmul, [t(2, 3, 4), t(2, 4, 5)]),
        ("softmax", T.softmax, [t(3, 5)]),
        ("tikhonov", lambda a: T.tikhonov(a, 1e-3), [t(2, 4, 4)]),
        # Cholesky reads one triangle, so probe through a symmetric parameterization
        ("spd_solve", lambda m, b: T.spd_solve(T.add(m, T.transpose(m, (0, 2, 1))), b), [spd, t(3, 5, 2)]),
        ("conv2d_3x3", T.conv2d, [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)]),
        ("conv2d_1x1", T.conv2d, [t(2, 3, 5, 5), t(2, 3, 1, 1)]),
        ("conv2d_stride2", lambda x, w: T.conv2d(x, w, stride=2), [t(1, 2, 6, 6), t(3, 2, 3, 3)]),
        ("batch_norm", lambda x, g, b: T.batch_norm(x, g, b), [t(4, 3, 4, 4), t(3, pos=True), t(3)]),
        ("downsample2_max", lambda x: T.downsample2(x, "maxpool"), [t(2, 2, 6, 6)]),
        ("downsample2_area", lambda x: T.downsample2(x, "area"), [t(2, 2, 6, 6)]),
        ("upsample2", T.upsample2, [t(2, 2, 3, 4)]),
        ("spatial_mean", T.spatial_mean, [t(2, 3, 4, 4)]),
        ("scale_channels", T.scale_channels, [t(2, 3, 4, 4), t(2, 3, 1, 1)]),
        ("orth_project", fusion.orth_project, [t(2, 12, 3)]),
        ("attention_weights", fusion.attention_weights, [t(2, 6, 3)]),
    ]
    reports = [grad_check(fn, ins, name=name, seed=seed) for name, fn, ins in checks]

    xa, xp, xf = t(2, 3, 8, 8, pos=True), t(2, 3, 8, 8, pos=True), t(2, 8, 8, 8)
    fusion.safm(xa, xp, xf, st, "safm", k=4, c1=4)
    reports.append(grad_check(lambda a, p, f, *ps: fusion.safm(a, p, f, st, "safm", k=4, c1=4),
                              [xa, xp, xf] + st.trainable(), name="safm", seed=seed))
    st2 = nn.ParamStore(seed + 1)
    xc, xs = t(2, 4, 6, 6), t(2, 4, 6, 6)
    fusion.cam_apply(xc, xs, st2, "cam")
    reports.append(grad_check(lambda a, b, *ps: fusion.cam_apply(a, b, st2, "cam"),
                              [xc, xs] + st2.trainable(), name="cam", seed=seed))
    st3 = nn.ParamStore(seed + 2)
    xb = t(2, 1, 4, 4)
    nn.conv_block(xb, st3, "blk", 3)
    reports.append(grad_check(lambda a, *ps: nn.conv_block(a, st3, "blk", 3),
                              [xb] + st3.trainable(), name="conv_block", seed=seed))
    if include_model:
        for variant in ("sarnet", "unet-base", "unet-ms"):
            mcfg = ModelConfig.toy(variant=variant)
            store = init_model(mcfg, seed=seed)
            x = rng.uniform(size=(2, 25, 32, 32))
            # ~80 parameter tensors: 6 coordinates each plus a directional probe
            reports.append(grad_check(lambda *ps: forward(x, store, mcfg, training=True), store.trainable(),
                                      name=f"forward[{variant}]", seed=seed, max_checks=6))
    return reports


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors also follow the JSON-on-stderr contract (exit 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.exit(_fail(EXIT_CONFIG, CliError(message)))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="thzlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, seed=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run-config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, required=seed, help="master seed" + (" (required)" if seed else ""))
        p.set_defaults(fn=fn)
        return p

    add("phantom", cmd_phantom, "build a phantom volume", seed=True)
    p = add("simulate", cmd_simulate, "simulate flip-augmented spectral views", seed=True)
    p.add_argument("--phantom")
    p.add_argument("--angles", type=int)
    p.add_argument("--step", type=float, help="angular step in degrees")
    add("dataset", cmd_dataset, "generate a leave-one-family-out dataset", seed=True)
    p = add("train", cmd_train, "train a model", seed=True)
    p.add_argument("--dataset")
    p = add("restore", cmd_restore, "restore simulated views with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--views")
    p.add_argument("--pgm", action="store_true", help="also write 16-bit PGM images")
    p = add("reconstruct", cmd_reconstruct, "tomographic reconstruction of restored views")
    p.add_argument("--views")
    p.add_argument("--pitch", type=float, default=1.0)
    p = add("eval", cmd_eval, "PSNR/SSIM table of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--name", default="object")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    p.add_argument("--quick", action="store_true", help="skip the full-network checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        result = args.fn(args, cfg)
    except (ConfigError, CliError) as e:
        return _fail(EXIT_CONFIG, e)
    except (NonFiniteError, SingularBasisError, np.linalg.LinAlgError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, e)
    except (OSError, io.FormatError, KeyError) as e:
        return _fail(EXIT_IO, e)
    except ValueError as e:
        return _fail(EXIT_CONFIG, e)
    print(json.dumps(io.jsonable(result), sort_keys=True))
    return EXIT_OK


def _fail(code: int, e: Exception) -> int:
    sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
