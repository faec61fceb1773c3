"""Acceptance criteria 1-9. Each test records one PASS/FAIL line (see conftest)."""
import contextlib
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from thzlab import io, physics, tomo
from thzlab.cli import main, standard_gradchecks
from thzlab.experiments import TOY_SEEDS, toy_run
from thzlab.fusion import attention_weights, cam_pool, orth_project, safm_apply
from thzlab.metrics import psnr
from thzlab.tensor import Tensor, conv2d
from thzlab.train import mse_loss

from test_tensor import conv_oracle

FBP_DISK_PSNR_60 = 25.2


@contextlib.contextmanager
def criterion(n, title, budget_s):
    t0 = time.perf_counter()
    detail = {}
    try:
        yield detail
    except BaseException:
        dt = time.perf_counter() - t0
        ACCEPTANCE[n] = f"[FAIL] {n}. {title} ({dt:.1f}s) {detail.get('msg', '')}".rstrip()
        raise
    dt = time.perf_counter() - t0
    ok = dt < budget_s
    ACCEPTANCE[n] = f"[{'PASS' if ok else 'FAIL'}] {n}. {title} ({dt:.1f}s, budget {budget_s}s) {detail.get('msg', '')}".rstrip()
    assert ok, f"criterion {n} over its runtime budget: {dt:.1f}s"


def test_1_subspace_algebra():
    with criterion(1, "subspace algebra", 5) as d:
        rng = np.random.default_rng(1)
        worst = np.zeros(3)
        for _ in range(100):
            v = rng.standard_normal((64, 8))
            p = orth_project(Tensor(v)).data
            errs = [np.linalg.norm(p @ p - p) / np.linalg.norm(p), np.abs(p - p.T).max(), np.abs(p @ v - v).max()]
            worst = np.maximum(worst, errs)
        d["msg"] = f"idem {worst[0]:.1e} sym {worst[1]:.1e} PV-V {worst[2]:.1e}"
        assert worst[0] <= 1e-5 and worst[1] <= 1e-6 and worst[2] <= 1e-6, d["msg"]


def test_2_attention_normalization():
    with criterion(2, "attention normalization", 5) as d:
        rng = np.random.default_rng(2)
        worst = 0.0
        for i in range(100):
            if i % 2:
                v = np.outer(rng.standard_normal(64), rng.standard_normal(8)) * rng.uniform(0.1, 5)
                v += 1e-9 * rng.standard_normal(v.shape)
            else:
                v = rng.standard_normal((64, 8))
            b = attention_weights(Tensor(v)).data
            worst = max(worst, np.abs(b.sum(axis=1) - 1).max())
        d["msg"] = f"max |row sum - 1| {worst:.1e}"
        assert worst <= 1e-6


def test_3_differentiability():
    with criterion(3, "differentiability", 120) as d:
        reports = standard_gradchecks(seed=0, include_model=True)
        bad = [r.name for r in reports if r.max_rel_err > 1e-5 or not r.passed]
        d["msg"] = f"{len(reports)} checks, max rel err {max(r.max_rel_err for r in reports):.1e}"
        names = {r.name for r in reports}
        assert {"safm", "cam", "conv_block", "forward[sarnet]"} <= names
        assert not bad, bad


def test_4_oracle_equivalence():
    with criterion(4, "oracle equivalence", 60) as d:
        rng = np.random.default_rng(4)
        worst = {}
        for _ in range(10):
            x = rng.standard_normal((2, 5, 6))
            w = rng.standard_normal((3, 2, 3, 3))
            worst["conv2d"] = max(worst.get("conv2d", 0), np.abs(conv2d(Tensor(x), Tensor(w)).data - conv_oracle(x, w)).max())

            g = rng.standard_normal((4, 5, 6))
            ref = np.array([sum(g[c, i, j] for i in range(5) for j in range(6)) / 30 for c in range(4)])
            worst["cam_pool"] = max(worst.get("cam_pool", 0), np.abs(cam_pool(Tensor(g)).data.ravel() - ref).max())

            a, b = rng.uniform(size=(2, 1, 6, 7))
            s = sum((b[0, i, j] - a[0, i, j]) ** 2 for i in range(6) for j in range(7)) / 42
            worst["mse_loss"] = max(worst.get("mse_loss", 0), abs(mse_loss(a, b).data - s))

            img = rng.uniform(size=(9, 9))
            col = [sum(img[i, j] for i in range(9)) for j in range(9)]
            worst["radon0"] = max(worst.get("radon0", 0), np.abs(tomo.radon(img, [0.0]).data[0] - col).max())

            xa, xp = rng.standard_normal((2, 3, 3, 3))
            beta = rng.dirichlet(np.ones(9), size=9)
            p = rng.standard_normal((9, 9))
            feats = np.concatenate([xa, xp]).reshape(6, 9).T
            o = np.zeros((9, 6))
            for j in range(9):
                for i in range(9):
                    s_i = [sum(p[i, m] * feats[m, c] for m in range(9)) for c in range(6)]
                    o[j] += beta[j, i] * np.array(s_i)
            eye = Tensor(np.eye(6).reshape(6, 6, 1, 1))
            out = safm_apply(Tensor(xa), Tensor(xp), Tensor(beta), Tensor(p), Tensor(np.zeros((6, 3, 3))), eye)
            worst["attention"] = max(worst.get("attention", 0), np.abs(out.data.reshape(6, 9).T - o).max())
        d["msg"] = " ".join(f"{k} {v:.0e}" for k, v in worst.items())
        assert max(worst.values()) <= 1e-10, worst


def _disk(n=128, r=40.0):
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    return ((yy - c) ** 2 + (xx - c) ** 2 <= r * r).astype(float)


def test_5_tomography_round_trip():
    with criterion(5, "tomography round trip", 60) as d:
        img = _disk()
        vals = {k: psnr(tomo.fbp(tomo.radon(img, np.arange(k) * 180.0 / k)), img) for k in (15, 30, 60, 120)}
        hist = []
        tomo.sart(tomo.radon(img, np.arange(30) * 6.0), iters=10, history=hist)
        mono = all(vals[b] >= vals[a] for a, b in [(15, 30), (30, 60), (60, 120)])
        sart_ok = all(b <= a for a, b in zip(hist, hist[1:]))
        d["msg"] = f"FBP@60 {vals[60]:.2f} dB; " + ", ".join(f"{k}:{v:.1f}" for k, v in vals.items())
        assert vals[60] >= 25.0 and vals[60] >= FBP_DISK_PSNR_60 - 0.05 and mono and sart_ok


def test_6_physics_consistency():
    with criterion(6, "physics consistency", 30) as d:
        f = np.asarray(physics.PAPER_BANDS_THZ)
        worst_phase = 0.0
        for n, dmm in [(1.3, 1.0), (1.55, 2.0), (1.7, 4.0), (2.0, 3.0)]:
            _, ph = physics.extract_bands(physics.slab_trace(n, dmm), physics.BandTable(), unwrap=True)
            slope = 2 * np.pi * (n - 1) * dmm / physics.C_MM_PER_PS
            worst_phase = max(worst_phase, np.abs(ph - slope * f).max())
        worst_att = 0.0
        for ad in np.linspace(0, 3, 16):
            for opt in np.linspace(0, 3, 7):
                tm = physics.time_max(physics.synth_traces(opt, ad, snr_db=np.inf))
                worst_att = max(worst_att, abs(tm / np.exp(-ad) - 1))
        d["msg"] = f"phase residual {worst_phase:.1e} rad, time_max error {100 * worst_att:.2f}%"
        assert worst_phase <= 1e-3 and worst_att <= 0.01


def test_7_toy_training():
    with criterion(7, "toy training (3 seeds)", 600) as d:
        runs = [toy_run("sarnet", s) for s in TOY_SEEDS]
        ratios = [r["final_loss"] / r["initial_loss"] for r in runs]
        gains = [r["test_psnr"] - r["degraded_psnr"] for r in runs]
        margin = float(np.mean(gains))
        d["msg"] = (f"loss ratios {', '.join(f'{x:.2f}' for x in ratios)}; held-out margin {margin:+.2f} dB "
                    f"(per seed {', '.join(f'{g:+.2f}' for g in gains)})")
        assert max(ratios) <= 0.5 and margin >= 2.0, d["msg"]


def test_8_ablation_trend():
    with criterion(8, "ablation trend", 1800) as d:
        mean = {v: float(np.mean([toy_run(v, s)["test_psnr"] for s in TOY_SEEDS]))
                for v in ("sarnet", "unet-ms", "unet-base")}
        gaps = (mean["sarnet"] - mean["unet-ms"], mean["unet-ms"] - mean["unet-base"])
        d["msg"] = (f"SARNet {mean['sarnet']:.2f} / U-Net-MS {mean['unet-ms']:.2f} / "
                    f"U-Net-base {mean['unet-base']:.2f} dB")
        assert min(gaps) >= -0.3, d["msg"]


def test_9_determinism(tmp_path):
    with criterion(9, "determinism", 60) as d:
        small = ["--set", "phantom.size=32", "--set", "dataset.n_train=16", "--set", "dataset.n_val=4",
                 "--set", "dataset.n_test=4", "--set", "train.steps=3"]
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            for cmd in (["phantom"], ["simulate", "--angles", "30", "--step", "6"], ["dataset"], ["train"]):
                assert main(cmd + ["--seed", "11", "--out", str(out)] + small) == 0
            assert main(["restore", "--out", str(out), "--pgm"]) == 0
            assert main(["reconstruct", "--out", str(out)]) == 0
            outs.append(out)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        rng = np.random.default_rng(9)
        rt = True
        for dt in (np.float32, np.float64):
            x = rng.standard_normal((3, 4, 5)).astype(dt)
            rt &= io.loads(io.dumps(x))[0].tobytes() == x.tobytes()
        img = rng.uniform(size=(20, 20))
        io.export_pgm(img, tmp_path / "x.pgm")
        rt &= np.array_equal(io.read_pgm(tmp_path / "x.pgm"), np.round(img * 65535).astype(np.int64))
        d["msg"] = f"{len(files)} files byte-identical: {same}; round trips exact: {rt}"
        assert same and rt
