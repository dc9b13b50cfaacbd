"""End-to-end acceptance checks, one test per criterion.

Each test records a single ``criterion N: PASS|FAIL ...`` line that the
conftest hook prints in the terminal summary.
"""

import time

import numpy as np
import pytest

from _oracles import probe_fd
from adlift.baselines import SoftConfig, fit2d, pgd_2d
from adlift.cli import main
from adlift.evaluation import evaluate, sweep
from adlift.lpgd import LpgdConfig, gradient_truncation, protect
from adlift.metrics import linf, psnr
from adlift.render import blend_weights, finite_diff_grads, render, render_backward
from adlift.scene import (
    Gaussians,
    Scene,
    bundled_cameras,
    bundled_scene,
    init_safeguard,
    make_camera_ring,
    make_synthetic_scene,
    split_train_novel,
)
from adlift.surrogate import AttackObjective, Surrogates, latent_shape, loss_st, loss_vt, loss_vu, predict_mask

MODELS = Surrogates.from_seed(0)
VU = AttackObjective.vu()
ETA = 8.0 / 255.0


def _verdict(record_property, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    record_property("criterion", line)
    return ok


@pytest.fixture(scope="module")
def bundled_run():
    """One instrumented 400-iteration protect run on the bundled scene."""
    scene, cams = bundled_scene(), bundled_cameras()
    cfg = LpgdConfig(eta=ETA)
    residuals = []
    t0 = time.perf_counter()
    out, log = protect(init_safeguard(scene, "copy_raw"), cams, VU, MODELS, cfg,
                       callback=lambda rec, target, raw: residuals.append(np.max(np.abs(target - raw))))
    return scene, cams, cfg, out, log, residuals, time.perf_counter() - t0


def test_criterion_1_renderer_gradients(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_raw, n_sg = int(rng.integers(1, 11)), int(rng.integers(1, 11))
        base = make_synthetic_scene(n_raw, 100 + seed, 1.0, tuple(rng.uniform(0, 1, 3)))
        scene = base.with_safeguard(make_synthetic_scene(n_sg, 500 + seed, 1.0).raw)
        cam = make_camera_ring(5, 3.0, 1.0, 32, 50)[seed % 5]
        adj = rng.standard_normal((32, 32, 3))
        ana = render_backward(scene, cam, adj).records
        fd = finite_diff_grads(scene, cam, lambda im: float(np.sum(adj * im)), step=1e-5).records
        worst = max(worst, float(np.max(np.abs(ana - fd) / np.maximum(1e-8, np.abs(ana)))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60
    assert _verdict(record_property, 1, ok, f"max rel err {worst:.2e} (< 1e-4), {dt:.1f}s (< 60s)")


def test_criterion_2_surrogate_gradients(record_property):
    t0 = time.perf_counter()
    scene = init_safeguard(make_synthetic_scene(30, 4, 1.0, (0.5, 0.5, 0.5)), "copy_raw")
    cam = make_camera_ring(4, 3.0, 1.0, 32, 50)[0]
    raw = render(scene.raw_only(), cam)
    img = np.clip(raw + np.random.default_rng(0).uniform(-ETA, ETA, raw.shape), 0, 1)
    target = np.random.default_rng(1).uniform(size=raw.shape)
    lh, lw = latent_shape(32, 32)
    mask = np.zeros((lh, lw))
    mask[1, 2] = 1.0
    box = (1, 1, 2, 2)
    enc, seg = MODELS.encoder, MODELS.seghead
    errs = {
        "vu": probe_fd(lambda x: loss_vu(x, raw, enc)[0], img, loss_vu(img, raw, enc)[1]),
        "vt": probe_fd(lambda x: loss_vt(x, target, enc)[0], img, loss_vt(img, target, enc)[1]),
        "st": probe_fd(lambda x: loss_st(x, seg, box, mask)[0], img, loss_st(img, seg, box, mask)[1]),
    }
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-6 and dt < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert _verdict(record_property, 2, ok, f"rel errs {detail} (< 1e-6), {dt:.1f}s (< 30s)")


def test_criterion_3_hard_bound(record_property, bundled_run):
    _, _, cfg, _, log, residuals, dt = bundled_run
    violations = sum(r > cfg.eta for r in residuals)
    ok = len(residuals) == 400 and violations == 0 and dt < 300
    assert _verdict(record_property, 3, ok,
                    f"{len(residuals)} iterations, {violations} bound violations, max {max(residuals):.6f} "
                    f"<= eta {cfg.eta:.6f}, {dt:.0f}s (< 300s)")


def test_criterion_4_pgd_oracle(record_property):
    t0 = time.perf_counter()
    identical = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        raw = rng.uniform(size=(32, 32, 3))
        eta = float(rng.choice([2, 4, 8, 16])) / 255
        x0 = np.clip(raw + rng.uniform(-2 * eta, 2 * eta, raw.shape), 0, 1)
        cfg = LpgdConfig(eta=eta, alpha=eta / 4, k_p=int(rng.integers(1, 11)))
        a, _ = gradient_truncation(x0, raw, VU, MODELS, cfg)
        b = pgd_2d(x0, raw, VU, MODELS, cfg.k_p, cfg.alpha, cfg.eta)
        identical += a.tobytes() == b.tobytes()
    dt = time.perf_counter() - t0
    ok = identical == 20 and dt < 30
    assert _verdict(record_property, 4, ok, f"{identical}/20 bit-identical, {dt:.1f}s (< 30s)")


def test_criterion_5_view_generalization(record_property):
    t0 = time.perf_counter()
    scene = bundled_scene()
    train, novel = split_train_novel(bundled_cameras(24))
    cfg = LpgdConfig()
    ad, _ = protect(init_safeguard(scene, "copy_raw"), train, VU, MODELS, cfg)
    f2, _ = fit2d(scene, train, VU, MODELS, cfg)
    ra = evaluate(scene, ad, train, novel, VU, MODELS)
    rf = evaluate(scene, f2, train, novel, VU, MODELS)
    dt = time.perf_counter() - t0
    ok_a = ra.adv_novel < rf.adv_novel
    ok_b = rf.gap >= 2 * ra.gap
    ok = ok_a and ok_b and dt < 900
    assert _verdict(
        record_property, 5, ok,
        f"(a) novel L_VU adlift {ra.adv_novel:.3e} vs fit2d {rf.adv_novel:.3e} [{'ok' if ok_a else 'no'}]; "
        f"(b) gap fit2d {rf.gap:.2e} vs adlift {ra.gap:.2e} (need >= 2x) [{'ok' if ok_b else 'no'}]; "
        f"train L_VU adlift {ra.adv_train:.3e} fit2d {rf.adv_train:.3e}; {dt:.0f}s (< 900s)")


def test_criterion_6_invisibility(record_property, bundled_run):
    scene, cams, cfg, out, _, _, _ = bundled_run
    raw_scene = scene.raw_only()
    ps, lin = [], []
    for cam in cams:
        x, x_raw = render(out, cam), render(raw_scene, cam)
        ps.append(psnr(x, x_raw))
        lin.append(linf(x, x_raw))
    med = float(np.median(lin))
    ok = min(ps) >= 28.0 and med <= 1.5 * cfg.eta
    assert _verdict(record_property, 6, ok,
                    f"min PSNR {min(ps):.2f} dB (>= 28), median linf {med:.4f} (<= {1.5 * cfg.eta:.4f})")


def test_criterion_7_tradeoff_dominance(record_property):
    t0 = time.perf_counter()
    scene, cams = bundled_scene(), bundled_cameras()
    soft = sweep(scene, cams, VU, MODELS, "soft_w", [0.0, 1.0, 2.0, 3.0, 10.0], soft_cfg=SoftConfig(),
                 novel_cams=[])
    ours = sweep(scene, cams, VU, MODELS, "eta", [4 / 255, 8 / 255, 16 / 255], novel_cams=[])
    soft_pts = [r.scatter() for r in soft.rows]
    our_pts = [r.scatter() for r in ours.rows]
    undominated = [
        (p, a) for p, a in our_pts
        if not any(sp >= p - 0.5 and sa <= a for sp, sa in soft_pts)
    ]
    dt = time.perf_counter() - t0
    ok = bool(undominated) and dt < 1200
    fmt = lambda pts: " ".join(f"({p:.1f}dB,{a:.2e})" for p, a in pts)  # noqa: E731
    assert _verdict(record_property, 7, ok,
                    f"undominated adlift points {len(undominated)}/3; adlift {fmt(our_pts)}; "
                    f"soft {fmt(soft_pts)}; {dt:.0f}s (< 1200s)")


def test_criterion_8_determinism(record_property, tmp_path):
    t0 = time.perf_counter()
    gen = tmp_path / "in"
    assert main(["gen-scene", "--n", "50", "--seed", "7", "--out", str(gen)]) == 0
    files = []
    for name, threads in (("run1", "1"), ("run2", "1"), ("run8", "8")):
        out = tmp_path / name
        code = main(["protect", "--scene", str(gen / "scene.json"), "--cams", str(gen / "cameras.json"),
                     "--out", str(out), "--iters", "100", "--seed", "3", "--threads", threads])
        assert code == 0
        files.append((out / "protected.json").read_bytes())
    dt = time.perf_counter() - t0
    ok = files[0] == files[1] == files[2] and dt < 600
    assert _verdict(record_property, 8, ok,
                    f"repeat identical {files[0] == files[1]}, threads 1 vs 8 identical {files[0] == files[2]}, "
                    f"{dt:.0f}s (< 600s)")


def test_criterion_9_conservation(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        base = make_synthetic_scene(10, 40 + seed, 1.0, (0.3, 0.3, 0.3))
        scene = init_safeguard(base, "copy_raw")
        cam = make_camera_ring(5, 3.0, 1.0, 32, 50)[seed]
        for py in range(32):
            for px in range(32):
                w, T = blend_weights(scene, cam, px, py)
                worst = max(worst, abs(w.sum() + T - 1.0))
    bg = np.array([0.1, 0.6, 0.35])
    empty = render(Scene(Gaussians.empty(), Gaussians.empty(), bg), bundled_cameras()[0])
    exact = bool(np.all(empty == bg))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and exact and dt < 10
    assert _verdict(record_property, 9, ok,
                    f"max |sum w + T - 1| {worst:.1e} (<= 1e-12), empty render exact {exact}, {dt:.1f}s (< 10s)")


def test_criterion_10_st_efficacy(record_property):
    t0 = time.perf_counter()
    scene, cams = bundled_scene(), bundled_cameras()
    lh, lw = latent_shape(cams[0].height, cams[0].width)
    box = (lw // 4, lh // 4, lw // 2, lh // 2)
    obj = AttackObjective.st(np.zeros((lh, lw)), box)
    out, _ = protect(init_safeguard(scene, "copy_raw"), cams, obj, MODELS, LpgdConfig())
    x, y, w, h = box

    def in_box(s):
        return float(np.mean([predict_mask(MODELS.seghead, render(s, c), box)[y:y + h, x:x + w].mean()
                              for c in cams]))

    before, after = in_box(scene), in_box(out)
    drop = 1.0 - after / before
    dt = time.perf_counter() - t0
    ok = drop >= 0.5 and dt < 600
    assert _verdict(record_property, 10, ok,
                    f"in-box mask mean {before:.4f} -> {after:.4f}, drop {100 * drop:.1f}% (>= 50%), "
                    f"{dt:.0f}s (< 600s)")
