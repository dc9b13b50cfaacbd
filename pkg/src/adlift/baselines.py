"""Comparison strategies: plain image-space PGD, Fit2D (attack each view in
2D, then fit Gaussians to the results), and a soft-constraint baseline that
trades attack strength against an SSIM penalty with no hard bound."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lpgd import LpgdConfig, TrainLog, IterRecord, image_to_gaussian_fit, make_fit_optimizer, view_schedule
from .metrics import linf, psnr, ssim_with_grad
from .render import rasterize, render, render_backward
from .rng import SplitMix64
from .scene import Camera, Gaussians, Scene, init_safeguard
from .surrogate import AttackObjective, Surrogates, adv_loss


def pgd_2d(
    x0: np.ndarray,
    x_raw: np.ndarray,
    objective: AttackObjective,
    models: Surrogates,
    steps: int,
    alpha: float,
    eta: float,
    loss_fn=None,
) -> np.ndarray:
    """Signed PGD in image space with l-inf projection around ``x_raw`` and a
    [0, 1] clamp. Written independently of ``lpgd.gradient_truncation`` so
    each can check the other."""
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if np.shape(x0) != x_raw.shape:
        raise ValueError(f"shape mismatch: {np.shape(x0)} vs {x_raw.shape}")
    upper = x_raw + eta
    lower = x_raw - eta
    # keep |edge - x_raw| <= eta after rounding
    for _ in range(4):
        over = (upper - x_raw) > eta
        if not over.any():
            break
        upper[over] = np.nextafter(upper[over], -np.inf)
    for _ in range(4):
        over = (x_raw - lower) > eta
        if not over.any():
            break
        lower[over] = np.nextafter(lower[over], np.inf)

    def proj(x):
        x = np.maximum(np.minimum(x, upper), lower)
        return np.maximum(np.minimum(x, 1.0), 0.0)

    x = proj(np.asarray(x0, dtype=np.float64))
    for _ in range(steps):
        if loss_fn is None:
            _, g = adv_loss(objective, models, x, x_raw)
        else:
            _, g = loss_fn(x)
        step = np.where(g > 0, alpha, np.where(g < 0, -alpha, 0.0))
        x = proj(x - step)
    return x


def random_start(x_raw: np.ndarray, eta: float, seed: int) -> np.ndarray:
    """Uniform point in the eta-ball around ``x_raw`` (SplitMix64 stream)."""
    rng = SplitMix64(seed)
    noise = np.array([rng.uniform() for _ in range(x_raw.size)]).reshape(x_raw.shape)
    return x_raw + eta * (2.0 * noise - 1.0)


def fit2d_pgd_steps(cfg: LpgdConfig, n_views: int) -> int:
    """Per-view PGD steps matching L-PGD's total truncation budget."""
    return max(cfg.k_p, cfg.k_p * math.ceil(cfg.e_total / n_views))


@dataclass
class Fit2DResult:
    targets: list[np.ndarray]
    target_adv: list[float]
    log: TrainLog


def fit2d(
    scene: Scene,
    cameras: Sequence[Camera],
    objective: AttackObjective,
    models: Surrogates,
    cfg: LpgdConfig,
) -> tuple[Scene, Fit2DResult]:
    """Stage 1 attacks every view on its own; stage 2 fits a copy_raw
    safeguard set to those fixed targets for ``e_total * k_l`` steps."""
    if not cameras:
        raise ValueError("fit2d needs at least one camera")
    raw_scene = scene.raw_only()
    raws = [render(raw_scene, c) for c in cameras]
    steps = fit2d_pgd_steps(cfg, len(cameras))
    targets, target_adv = [], []
    for v, x_raw in enumerate(raws):
        x0 = random_start(x_raw, cfg.eta, cfg.seed * 1_000_003 + v)
        x = pgd_2d(x0, x_raw, objective, models, steps, cfg.alpha, cfg.eta)
        targets.append(x)
        target_adv.append(adv_loss(objective, models, x, x_raw)[0])

    cur = init_safeguard(raw_scene, "copy_raw")
    opt = make_fit_optimizer(cur, cfg)
    log = TrainLog()
    for k, v in enumerate(view_schedule(len(cameras), cfg)):
        before = adv_loss(objective, models, render(cur, cameras[v]), raws[v])[0]
        cur, trace = image_to_gaussian_fit(cur, cameras[v], targets[v], cfg, opt)
        img = render(cur, cameras[v])
        log.records.append(IterRecord(
            iteration=k, view=v, adv_before=before,
            adv_after=adv_loss(objective, models, img, raws[v])[0],
            fit_loss=trace[-1], target_linf=linf(targets[v], raws[v]), render_linf=linf(img, raws[v]),
        ))
    return cur, Fit2DResult(targets, target_adv, log)


# ---------------------------------------------------------------- soft constraint

_SOFT_COLUMNS = {"color": slice(10, 13), "opacity": slice(13, 14)}


@dataclass(frozen=True)
class SoftConfig:
    weight_w: float = 1.0
    lr: float = 1e-2
    steps: int = 200
    trainable_attrs: tuple[str, ...] = ("color", "opacity")
    checkpoint_every: int = 20

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.weight_w < 0:
            raise ValueError("weight_w must be non-negative")
        if not self.trainable_attrs or any(a not in _SOFT_COLUMNS for a in self.trainable_attrs):
            raise ValueError("trainable_attrs must be a non-empty subset of {color, opacity}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_attrs"] = list(self.trainable_attrs)
        return d


@dataclass
class TradeoffPoint:
    step: int
    psnr_db: float
    adv_loss: float
    objective: float


@dataclass
class TradeoffLog:
    points: list[TradeoffPoint] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(p)) + "\n" for p in self.points)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def soft_constraint_protect(
    scene: Scene,
    cameras: Sequence[Camera],
    objective: AttackObjective,
    models: Surrogates,
    soft_cfg: SoftConfig,
) -> tuple[Scene, TradeoffLog]:
    """Minimise sum_v L_adv(R(G, v)) + w * (1 - SSIM(R(G, v), R(G_raw, v)))
    over the selected safeguard attributes with Adam; no projection."""
    if not cameras:
        raise ValueError("soft_constraint_protect needs at least one camera")
    if len(scene.safeguard) == 0:
        scene = init_safeguard(scene, "copy_raw")
    raws = [render(scene.raw_only(), c) for c in cameras]
    mask = np.zeros(14)
    for a in soft_cfg.trainable_attrs:
        mask[_SOFT_COLUMNS[a]] = 1.0
    m = np.zeros((len(scene.safeguard), 14))
    v2 = np.zeros_like(m)
    b1, b2, eps = 0.9, 0.999, 1e-8
    rec = scene.safeguard.to_records()
    log = TradeoffLog()

    def evaluate(step: int, images: list[np.ndarray], total: float) -> None:
        log.points.append(TradeoffPoint(
            step=step,
            psnr_db=float(np.mean([psnr(im, r) for im, r in zip(images, raws)])),
            adv_loss=float(np.mean([adv_loss(objective, models, im, r)[0] for im, r in zip(images, raws)])),
            objective=total,
        ))

    for t in range(soft_cfg.steps + 1):
        cur = scene.with_safeguard(Gaussians.from_records(rec))
        grad = np.zeros_like(rec)
        images = []
        total = 0.0
        for cam, x_raw in zip(cameras, raws):
            frame = rasterize(cur, cam)
            img = frame.image
            images.append(img)
            a_val, g_adv = adv_loss(objective, models, img, x_raw)
            s_val, g_s = ssim_with_grad(img, x_raw)
            total += a_val + soft_cfg.weight_w * (1.0 - s_val)
            if t < soft_cfg.steps:
                g_img = g_adv - soft_cfg.weight_w * g_s
                grad += render_backward(cur, cam, g_img, frame).records
        if t % soft_cfg.checkpoint_every == 0 or t == soft_cfg.steps:
            evaluate(t, images, total)
        if t == soft_cfg.steps:
            break
        grad *= mask
        m = b1 * m + (1 - b1) * grad
        v2 = b2 * v2 + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** (t + 1))
        vhat = v2 / (1 - b2 ** (t + 1))
        rec = rec - soft_cfg.lr * mask * mhat / (np.sqrt(vhat) + eps)
    return scene.with_safeguard(Gaussians.from_records(rec)), log


__all__ = [
    "Fit2DResult", "SoftConfig", "TradeoffLog", "TradeoffPoint", "fit2d", "fit2d_pgd_steps", "pgd_2d",
    "random_start", "soft_constraint_protect",
]
