"""Acceptance suite.

One test per criterion. Each records a PASS/FAIL line (printed at the end
of the session by the conftest hook) before asserting, so a failing
criterion still reports its measured numbers.

The desk-scale experiment (criteria 5 to 7) trains three models from
``demos/configs/desk.json``. Trained checkpoints are cached under
``artifacts/desk`` and reused only when their stored experiment fingerprint
matches the config; delete that directory to retrain from scratch.
"""

import math
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import (
    layer_grad_error,
    nmse_direct,
    psnr_direct,
    record_criterion,
    ssim_direct,
    unet_grad_error,
)

from mocodiff import baseline, dataio, metrics, pipeline
from mocodiff.cli import main
from mocodiff.diffusion import ancestral_sample, build_schedule, correct, read_sweep_csv
from mocodiff.motionsim import (
    MotionTrajectory,
    acquisition_order,
    phantom,
    random_trajectory,
    simulate_motion,
)
from mocodiff.neural import (
    AvgPool2,
    Block,
    Conv2d,
    Dense,
    GroupNorm,
    SiLU,
    Upsample2,
    build_unet,
)
from mocodiff.numerics import fft2, ifft2_full
from mocodiff.preprocess import RigidParams2D, apply_rigid

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "demos" / "configs"
CACHE = Path(os.environ.get("MOCODIFF_CACHE", ROOT / "artifacts" / "desk"))


def _fmt(x):
    return f"{x:.3g}"


# ---------------------------------------------------------------- 1 gradients


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    layers = {
        "conv3x3": (lambda a: Conv2d(a, "c", 3, 4, 3), (2, 3, 5, 6)),
        "conv1x1": (lambda a: Conv2d(a, "c", 3, 2, 1), (2, 3, 4, 4)),
        "dense": (lambda a: Dense(a, "d", 5, 3), (4, 5)),
        "groupnorm": (lambda a: GroupNorm(a, "g", 6, 3), (2, 6, 3, 4)),
        "silu": (lambda a: SiLU(), (2, 3, 4, 4)),
        "avgpool": (lambda a: AvgPool2(), (2, 3, 4, 6)),
        "upsample": (lambda a: Upsample2(), (2, 3, 3, 2)),
        "block": (lambda a: _TimeFreeBlock(a), (2, 2, 4, 4)),
    }
    errs = {name: layer_grad_error(make, shape) for name, (make, shape) in layers.items()}
    # composed network: every parameter of a narrow one, then a sample at default width
    narrow = build_unet(channels=4, depth=1, time_embed_dim=8, seed=1)
    errs["unet_narrow_all"] = float(unet_grad_error(narrow).max())
    wide = build_unet(seed=1)
    small = [off + k for _, shape, off in wide.param_slots() if len(shape) == 1 for k in range(shape[0])]
    picks = sorted(set(small) | set(np.random.default_rng(9).choice(wide.n_params, 300, replace=False).tolist()))
    errs["unet_default_sample"] = float(unet_grad_error(wide, picks, seed=2, t=250).max())
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-3 and elapsed < 120
    record_criterion(1, "gradient correctness", ok, f"max rel err {_fmt(errs[worst])} ({worst}), {elapsed:.0f} s")
    assert errs[worst] < 1e-3, errs
    assert elapsed < 120


class _TimeFreeBlock:
    """Conv block with a fixed time vector, exposed through the single-layer
    bind/forward/backward protocol."""

    def __init__(self, alloc):
        self.blk = Block(alloc, "b", 2, 4, 2, 6)
        self.tv = np.random.default_rng(11).standard_normal((2, 6))

    def bind(self, alloc, params):
        for layer in self.blk.layers:
            layer.bind(alloc, params)

    def forward(self, x):
        return self.blk.forward(x, self.tv)

    def backward(self, cache, up, grad):
        return self.blk.backward(cache, up, grad)[0]


# ---------------------------------------------------------------- 2 FFT


def test_criterion_02_fft():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_rt = worst_pv = 0.0
    for shape in [(240, 180), (63, 65), (64, 64), (1, 1), (1, 17), (97, 89), (128, 30)]:
        x = rng.standard_normal(shape)
        k = fft2(x)
        back, _ = ifft2_full(k)
        worst_rt = max(worst_rt, float(np.max(np.abs(back - x))))
        e = float(np.sum(x**2))
        worst_pv = max(worst_pv, abs(e - float(np.sum(np.abs(k) ** 2))) / e)
    elapsed = time.perf_counter() - t0
    ok = worst_rt <= 1e-6 and worst_pv <= 1e-6 and elapsed < 60
    record_criterion(2, "FFT round trip and Parseval", ok, f"round trip {_fmt(worst_rt)}, Parseval {_fmt(worst_pv)}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3 motion simulation


def test_criterion_03_motion_oracles():
    t0 = time.perf_counter()
    img = phantom(np.random.default_rng(3), 64)
    ident = float(np.max(np.abs(simulate_motion(img, MotionTrajectory.identity(64)) - img)))
    worst_shift = 0.0
    for tx, ty in [(3, 0), (0, -4), (2, 5)]:
        p = RigidParams2D(tx, ty, 0)
        out = simulate_motion(img, MotionTrajectory(segments=(((0, 64), p),), n_lines=64))
        worst_shift = max(worst_shift, float(np.max(np.abs(out - apply_rigid(img, p)))))
    order = acquisition_order(64)
    hits = 0
    for i in range(20):
        ph = phantom(np.random.default_rng(700 + i), 64)
        # a different pose for 6 of 64 lines (about 10%)
        traj = MotionTrajectory.from_events(64, [29, 35], [RigidParams2D(3, 2, math.radians(2)), RigidParams2D()])
        out = simulate_motion(ph, traj, order)
        hits += np.mean(np.abs(out - ph) > 1e-3) >= 0.5
    elapsed = time.perf_counter() - t0
    ok = ident <= 1e-5 and worst_shift <= 1e-5 and hits == 20 and elapsed < 120
    record_criterion(3, "motion simulation oracles", ok, f"identity {_fmt(ident)}, translation {_fmt(worst_shift)}, locality {hits}/20")
    assert ok


# ---------------------------------------------------------------- 4 correction algebra


def test_criterion_04_correction_algebra():
    s = build_schedule()
    model = build_unet(channels=4, time_embed_dim=8, seed=0)
    Y = np.random.default_rng(0).random((2, 1, 16, 16))
    identity = np.array_equal(correct(Y, 0, model, s, np.random.default_rng(1)), Y)

    def zero(x, t):
        return np.zeros_like(x)

    out = ancestral_sample(None, s, Y.shape, np.random.default_rng(9), eps_fn=zero, sigma_scale=0.0)
    x = np.random.default_rng(9).standard_normal(Y.shape)
    for t in range(s.T, 0, -1):
        x = x / math.sqrt(s.alpha[t])
    recursion = float(np.max(np.abs(out - x) / np.maximum(np.abs(x), 1.0)))

    ab, a1 = s.alpha_bar[1], s.alpha[1]
    z = np.random.default_rng(4).standard_normal(Y.shape)
    flag_ok = True
    for literal, coef in [(False, math.sqrt(1 - ab)), (True, 1 - ab)]:
        got = correct(Y, 1, None, s, np.random.default_rng(4), paper_literal_noising=literal, eps_fn=zero)
        flag_ok &= bool(np.allclose(got, (math.sqrt(ab) * Y + coef * z) / math.sqrt(a1), rtol=0, atol=1e-12))
    # the flag changes the noised input only: the two outputs differ by exactly the noise term
    d = correct(Y, 1, None, s, np.random.default_rng(4), paper_literal_noising=True, eps_fn=zero) - correct(
        Y, 1, None, s, np.random.default_rng(4), eps_fn=zero
    )
    flag_ok &= bool(np.allclose(d, ((1 - ab) - math.sqrt(1 - ab)) * z / math.sqrt(a1), rtol=0, atol=1e-12))
    ok = identity and recursion <= 1e-10 and flag_ok
    record_criterion(4, "correction algebra", ok, f"n=0 bit-exact {identity}, recursion {_fmt(recursion)}, noising flag {flag_ok}")
    assert ok


# ---------------------------------------------------------------- 5-7 desk experiment


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = pipeline.load_config(CONFIGS / "desk.json")
    out_dir = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    result = pipeline.run_experiment(cfg, out_dir, cache_dir=CACHE)
    result["elapsed"] = time.perf_counter() - t0
    result["cfg"] = cfg
    result["dir"] = out_dir
    return result


def _means(path):
    recs = metrics.read_records_csv(path)
    return len(recs), float(np.mean([r.ssim for r in recs])), float(np.mean([r.nmse for r in recs]))


@pytest.mark.slow
def test_criterion_05_desk_ddpm(desk):
    rec = desk["dir"] / "records"
    n_y, ssim_y, nmse_y = _means(rec / "uncorrected.csv")
    n_c, ssim_c, nmse_c = _means(rec / "diffusion.csv")
    gain = ssim_c - ssim_y
    ok = n_y == n_c == desk["cfg"].splits["test"] and gain >= 0.05 and nmse_c < nmse_y
    record_criterion(
        5,
        "desk DDPM correction",
        ok,
        f"SSIM {ssim_y:.3f} -> {ssim_c:.3f} (gain {gain:+.3f}), NMSE {nmse_y:.3f} -> {nmse_c:.3f}, "
        f"{n_c} test images, reused {desk['reused']}, {desk['elapsed'] / 60:.0f} min",
    )
    assert n_c == desk["cfg"].splits["test"]
    assert gain >= 0.05
    assert nmse_c < nmse_y


@pytest.mark.slow
def test_criterion_06_sweep_tradeoff(desk):
    rows = read_sweep_csv(desk["dir"] / "sweep" / "sweep.csv")
    ns = [r["n"] for r in rows]
    vals = [r["nmse_mean"] for r in rows]
    k = int(np.argmin(vals))
    interior = 0 < k < len(vals) - 1
    margin = min(1 - vals[k] / vals[0], 1 - vals[k] / vals[-1])
    ok = ns == [0, 50, 100, 150, 250, 400] and interior and margin >= 0.05
    curve = ", ".join(f"{n}:{v:.3f}" for n, v in zip(ns, vals))
    record_criterion(6, "re-entry step trade-off", ok, f"NMSE by n [{curve}], min at n={ns[k]}, margin {margin:.1%}")
    assert ns == [0, 50, 100, 150, 250, 400]
    assert interior
    assert margin >= 0.05


def _overfit_steps(max_steps=2000, check_every=25):
    """Steps the default U-Net needs to reach train NMSE < 0.01 on 10 pairs."""
    items = []
    for i in range(10):
        c = phantom(np.random.default_rng(100 + i), 64)
        y = simulate_motion(c, random_trajectory(np.random.default_rng(200 + i), 64, 3))
        items.append(baseline.PairedItem(y, c, f"P{i}"))
    ds = baseline.PairedDataset(items)
    Y, X = ds.arrays()
    model = build_unet(seed=0)
    state = {"reached": None, "nmse": math.inf}

    def check(step, loss):
        if (step + 1) % check_every:
            return False
        P = baseline.predict(model, Y)
        state["nmse"] = float(np.mean([metrics.nmse(P[i, 0], X[i, 0]) for i in range(len(X))]))
        if state["nmse"] < 0.01:
            state["reached"] = step + 1
            return True
        return False

    # the training pairs double as the validation set; only the callback decides when to stop
    baseline.train_supervised(
        model, ds, ds, lr=baseline.UNET_LR, batch_size=6, steps=max_steps, rng=np.random.default_rng(0),
        val_every=max_steps, callback=check,
    )
    return state["reached"], state["nmse"]


@pytest.mark.slow
def test_criterion_07_supervised_baseline(desk):
    cfg = desk["cfg"]
    model = dataio.load_checkpoint(desk["checkpoints"]["unet_synth"])
    clean_rows = pipeline.select(pipeline.read_manifest(desk["manifest"]), cfg, "test")
    clean = [dataio.read_tensor(r["path"]) for r in clean_rows]
    by_sev = {}
    for sev in (1, 3, 5):
        # fresh trajectories, disjoint from every seed the experiment used
        Y = np.stack([simulate_motion(c, random_trajectory(np.random.default_rng((9000 + i) * 10 + sev), 64, sev)) for i, c in enumerate(clean)])
        P = baseline.correct_supervised(model, Y)
        s_id = float(np.mean([metrics.ssim(y, c) for y, c in zip(Y, clean)]))
        s_net = float(np.mean([metrics.ssim(p, c) for p, c in zip(P, clean)]))
        by_sev[sev] = (s_id, s_net)
    beats = all(net > ident for ident, net in by_sev.values())
    reached, last = _overfit_steps()
    ok = beats and reached is not None
    detail = ", ".join(f"sev {s}: {a:.3f} -> {b:.3f}" for s, (a, b) in by_sev.items())
    detail += f"; overfit NMSE < 0.01 at step {reached}" if reached else f"; overfit NMSE {last:.4f} after 2000 steps"
    record_criterion(7, "supervised baseline", ok, detail)
    assert beats, by_sev
    assert reached is not None


@pytest.mark.slow
def test_desk_model_samples_are_plausible(desk):
    """Unconditional samples stay in a sane range with a dark background frame."""
    model = dataio.load_checkpoint(desk["checkpoints"]["ddpm"])
    x = ancestral_sample(model, desk["cfg"].schedule(), (16, 1, 64, 64), np.random.default_rng(0))
    frame = np.concatenate([x[..., :2, :].ravel(), x[..., -2:, :].ravel(), x[..., 2:-2, :2].ravel(), x[..., 2:-2, -2:].ravel()])
    assert x.min() >= -0.2 and x.max() <= 1.2
    assert frame.mean() < 0.1


@pytest.mark.slow
def test_desk_full_depth_forgets_input(desk):
    """Re-entering at n = T - 1 keeps less of the input than n = 50."""
    cfg = desk["cfg"]
    model = dataio.load_checkpoint(desk["checkpoints"]["ddpm"])
    rows = pipeline.select(pipeline.read_manifest(desk["pairs"]["real"]), cfg, "test")[:8]
    Y = np.stack([dataio.read_tensor(r["corrupted_path"]) for r in rows])
    sched = cfg.schedule()

    def corr(n):
        out = correct(Y, n, model, sched, np.random.default_rng(n))
        return float(np.mean([np.corrcoef(o.ravel(), y.ravel())[0, 1] for o, y in zip(out, Y)]))

    assert corr(sched.T - 1) < corr(50)


# ---------------------------------------------------------------- 8 metrics


def test_criterion_08_metrics_oracle():
    rng = np.random.default_rng(8)
    worst = {"ssim": 0.0, "nmse": 0.0, "psnr": 0.0}
    for _ in range(100):
        H, W = rng.integers(11, 25, 2)
        x = rng.random((H, W))
        y = np.clip(x + rng.normal(0, rng.uniform(0.01, 0.3), (H, W)), 0, 1)
        worst["ssim"] = max(worst["ssim"], abs(metrics.ssim(y, x) - ssim_direct(y, x)))
        worst["nmse"] = max(worst["nmse"], abs(metrics.nmse(y, x) - nmse_direct(y, x)))
        worst["psnr"] = max(worst["psnr"], abs(metrics.psnr(y, x) - psnr_direct(y, x)))
    const = metrics.ssim(np.full((32, 32), 0.5), np.full((32, 32), 0.25))
    base = np.full((16, 16), 0.5)
    p20 = metrics.psnr(base + 0.1, base)
    ok = max(worst.values()) <= 1e-6 and round(const, 4) == 0.8001 and abs(p20 - 20.0) < 1e-9
    record_criterion(8, "metrics oracle", ok, f"max deviation {_fmt(max(worst.values()))}, constant SSIM {const:.4f}, PSNR {p20:.6f} dB")
    assert max(worst.values()) <= 1e-6, worst
    assert round(const, 4) == 0.8001
    assert abs(p20 - 20.0) < 1e-9


# ---------------------------------------------------------------- 9 real-data structure


def _write_volume_pair(root: Path):
    """A 48x48x8 phantom volume and a moved, motion-corrupted copy as int16
    NIfTI files with a non-unit scale slope."""
    rng = np.random.default_rng(90)
    base = phantom(rng, 48)
    clean = np.stack([np.clip(base * (0.9 + 0.02 * k), 0, 1) for k in range(8)], axis=2)
    moved = np.empty_like(clean)
    for k in range(8):
        sl = apply_rigid(clean[:, :, k], RigidParams2D(2, -1, math.radians(1)))
        moved[:, :, k] = simulate_motion(sl, random_trajectory(np.random.default_rng(91 + k), 48, 3))
    paths = []
    for name, vol in (("clean.nii", clean), ("moving.nii", moved)):
        p = root / name
        p.write_bytes(dataio.write_nifti_fixture(vol.shape, np.round(vol * 4000).astype(np.int16), datatype=4, scl_slope=0.25))
        paths.append(p)
    return paths


def test_criterion_09_real_data_structure(tmp_path):
    clean, moving = _write_volume_pair(tmp_path)
    prep = tmp_path / "prep"
    cfg = tmp_path / "real.json"
    cfg.write_text(
        '{"image_size": 48, "timesteps": 20, "n": 5, "channels": 4, "time_embed_dim": 8, "ddpm_steps": 6, '
        '"unet_steps": 6, "val_every": 3, "patience": 2, "split_unit": "slice", "n_list": [0, 5, 10], '
        '"splits": {"train": 4, "val": 1, "test": 3}, "workers": 1}'
    )
    c = str(cfg)
    steps = [
        ["prepare-nifti", "--clean", str(clean), "--moving", str(moving), "--out", str(prep)],
        ["simulate", "--config", c, "--in", str(prep / "manifest.csv"), "--out", str(tmp_path / "synth")],
        ["train-ddpm", "--config", c, "--manifest", str(prep / "manifest.csv"), "--out-checkpoint", str(tmp_path / "ddpm.mrck")],
        ["train-baseline", "--config", c, "--pairs", str(prep / "pairs.csv"), "--label", "UNet Real", "--out-checkpoint", str(tmp_path / "real.mrck")],
        ["train-baseline", "--config", c, "--pairs", str(tmp_path / "synth" / "pairs.csv"), "--out-checkpoint", str(tmp_path / "synth.mrck")],
    ]
    for name, ck, method in (("unet_real", "real.mrck", "unet"), ("unet_synth", "synth.mrck", "unet"), ("diffusion", "ddpm.mrck", "ddpm")):
        d = tmp_path / "out" / name
        steps.append(["correct", "--config", c, "--checkpoint", str(tmp_path / ck), "--method", method, "--in", str(prep / "pairs.csv"), "--split", "test", "--out", str(d)])
        steps.append(["evaluate", "--config", c, "--in", str(d / "corrected.csv"), "--out", str(tmp_path / "rec" / f"{name}.csv")])
    recs = [str(tmp_path / "rec" / f"{n}.csv") for n in ("unet_real", "unet_synth", "diffusion")]
    steps.append(["report", "--records", *recs, "--out", str(tmp_path / "report")])
    codes = [main(argv) for argv in steps]
    text = (tmp_path / "report" / "report.txt").read_text() if (tmp_path / "report" / "report.txt").exists() else ""
    lines = text.strip().splitlines()
    pm = r"-?\d+\.\d{3} ± \d+\.\d{3}"
    row = re.compile(rf"^(UNet Real|UNet Synth|Diffusion) \| {pm} \| {pm} \| -?\d+\.\d ± \d+\.\d$")
    labels = [ln.split(" | ")[0] for ln in lines[2:]]
    ok = (
        all(code == 0 for code in codes)
        and lines[:2] == ["Transverse view metrics", "Label | SSIM | NMSE | PSNR"]
        and labels == ["UNet Real", "UNet Synth", "Diffusion"]
        and all(row.match(ln) for ln in lines[2:])
    )
    record_criterion(9, "real-data pipeline structure", ok, f"exit codes {sorted(set(codes))}, rows {labels}")
    assert all(code == 0 for code in codes), codes
    assert lines[:2] == ["Transverse view metrics", "Label | SSIM | NMSE | PSNR"]
    assert labels == ["UNet Real", "UNet Synth", "Diffusion"]
    assert all(row.match(ln) for ln in lines[2:]), lines


# ---------------------------------------------------------------- 10 determinism


def test_criterion_10_determinism(tmp_path):
    cfg = str(CONFIGS / "pinned_demo.json")
    for run in ("a", "b"):
        assert main(["experiment", "--config", cfg, "--out", str(tmp_path / run)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.suffix in (".mrck", ".csv"))
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    n_ck = sum(f.suffix == ".mrck" for f in files)
    n_rec = sum(f.parent.name == "records" for f in files)
    ok = not differ and n_ck == 3 and n_rec == 4
    record_criterion(10, "determinism", ok, f"{len(files)} checkpoint/CSV files compared, {len(differ)} differ")
    assert n_ck == 3 and n_rec == 4
    assert not differ, differ
