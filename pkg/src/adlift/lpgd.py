"""Lifted PGD: learn safeguard Gaussians whose renders stay inside an
l-infinity ball around the raw renders while minimising an adversarial loss.

Each outer iteration picks a training view, runs signed-gradient PGD on the
rendered image (the gradient stops at the image), then fits the safeguard
Gaussians to the projected image with Adam.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import linf, ssim_with_grad
from .render import rasterize, render, render_backward
from .rng import SplitMix64
from .scene import Camera, Gaussians, Scene, init_safeguard
from .surrogate import AttackObjective, Surrogates, adv_loss

# per-attribute learning-rate multipliers, laid out like a Gaussian record
LR_MULTIPLIERS = np.array([1.0] * 3 + [0.5] * 3 + [0.5] * 4 + [2.0] * 3 + [2.0])
ATTR_COLUMNS = {
    "position": slice(0, 3),
    "log_scale": slice(3, 6),
    "rotation": slice(6, 10),
    "color": slice(10, 13),
    "opacity": slice(13, 14),
}


@dataclass(frozen=True)
class LpgdConfig:
    eta: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    beta: float = 1e-3
    k_p: int = 10
    k_l: int = 50
    e_total: int = 400
    lambda_ssim: float = 0.0
    seed: int = 0
    init_mode: str = "copy_raw"
    view_schedule: str = "round_robin"

    def __post_init__(self) -> None:
        if not 0.0 < self.eta <= 0.25:
            raise ValueError("eta must lie in (0, 0.25]")
        if not 0.0 <= self.alpha <= self.eta:
            raise ValueError("alpha must lie in [0, eta]")
        if min(self.k_p, self.k_l, self.e_total) < 1:
            raise ValueError("k_p, k_l and e_total must be >= 1")
        if not 0.0 <= self.lambda_ssim < 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1)")
        if self.init_mode not in ("copy_raw", "from_fit2d"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.view_schedule not in ("round_robin", "random"):
            raise ValueError(f"unknown view_schedule {self.view_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterRecord:
    iteration: int
    view: int
    adv_before: float
    adv_after: float
    fit_loss: float
    target_linf: float
    render_linf: float


@dataclass
class TrainLog:
    records: list[IterRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> TrainLog:
        return cls([IterRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


# ---------------------------------------------------------------- image space


def project_linf(x: np.ndarray, center: np.ndarray, eta: float) -> np.ndarray:
    """Clamp into the l-inf ball of radius ``eta`` around ``center``, then into [0, 1]."""
    if np.shape(x) != np.shape(center):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(center)}")
    lo, hi = ball_edges(center, eta)
    return np.clip(np.clip(x, lo, hi), 0.0, 1.0)


def ball_edges(center: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Ball bounds pulled in by an ulp where rounding of ``center +/- eta``
    would otherwise put ``|edge - center|`` above ``eta`` in float arithmetic."""
    center = np.asarray(center, dtype=np.float64)
    lo, hi = center - eta, center + eta
    while np.any(bad := hi - center > eta):
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    while np.any(bad := center - lo > eta):
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    return lo, hi


def gradient_truncation(
    x_cur: np.ndarray,
    x_raw: np.ndarray,
    objective: AttackObjective,
    models: Surrogates,
    cfg: LpgdConfig,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None,
) -> tuple[np.ndarray, list[float]]:
    """``k_p`` signed steps on the image, each followed by projection.

    Returns the final iterate and the adversarial loss at every iterate
    (``k_p + 1`` values). ``loss_fn`` overrides the objective (test hook).
    """
    if np.shape(x_cur) != np.shape(x_raw):
        raise ValueError(f"shape mismatch: {np.shape(x_cur)} vs {np.shape(x_raw)}")
    if loss_fn is None:
        loss_fn = lambda im: adv_loss(objective, models, im, x_raw)  # noqa: E731
    x = project_linf(x_cur, x_raw, cfg.eta)
    trace = []
    for _ in range(cfg.k_p):
        value, grad = loss_fn(x)
        trace.append(value)
        x = project_linf(x - cfg.alpha * np.sign(grad), x_raw, cfg.eta)
    trace.append(loss_fn(x)[0])
    return x, trace


def recon_loss(img: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.0) -> tuple[float, np.ndarray]:
    """(1 - lambda) * MSE + lambda * (1 - SSIM), with gradient w.r.t. ``img``."""
    if np.shape(img) != np.shape(target):
        raise ValueError(f"shape mismatch: {np.shape(img)} vs {np.shape(target)}")
    diff = np.asarray(img, float) - np.asarray(target, float)
    mse = float(np.mean(diff * diff))
    grad = (1.0 - lambda_ssim) * 2.0 * diff / diff.size
    value = (1.0 - lambda_ssim) * mse
    if lambda_ssim > 0.0:
        s, gs = ssim_with_grad(img, target)
        value += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * gs
    return value, grad


# ---------------------------------------------------------------- fitting


class Adam:
    """Adam over safeguard records with a per-column learning-rate vector."""

    def __init__(self, shape: tuple[int, int], lr: np.ndarray, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = np.asarray(lr, dtype=np.float64)
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_fit_optimizer(scene: Scene, cfg: LpgdConfig) -> Adam:
    return Adam((len(scene.safeguard), 14), cfg.beta * LR_MULTIPLIERS)


def _renormalize(rec: np.ndarray) -> np.ndarray:
    rec[:, 6:10] /= np.linalg.norm(rec[:, 6:10], axis=1, keepdims=True)
    return rec


def image_to_gaussian_fit(
    scene: Scene,
    cam: Camera,
    target_image: np.ndarray,
    cfg: LpgdConfig,
    optimizer: Adam | None = None,
) -> tuple[Scene, list[float]]:
    """``k_l`` Adam steps pulling the render of ``scene`` toward ``target_image``.

    Only safeguard parameters move. The trace holds the reconstruction loss
    before each step and once more after the last one.
    """
    target_image = np.asarray(target_image, dtype=np.float64)
    if target_image.min() < 0.0 or target_image.max() > 1.0:
        raise ValueError("target image must lie in [0, 1]")
    if optimizer is None:
        optimizer = make_fit_optimizer(scene, cfg)
    rec = scene.safeguard.to_records()
    trace = []
    for _ in range(cfg.k_l):
        cur = scene.with_safeguard(Gaussians.from_records(rec))
        frame = rasterize(cur, cam)
        value, g_img = recon_loss(frame.image, target_image, cfg.lambda_ssim)
        trace.append(value)
        grads = render_backward(cur, cam, g_img, frame).records
        rec = _renormalize(optimizer.step(rec, grads))
        if not np.all(np.isfinite(rec)):
            raise FloatingPointError("non-finite safeguard parameters during fitting")
    out = scene.with_safeguard(Gaussians.from_records(rec))
    trace.append(recon_loss(render(out, cam), target_image, cfg.lambda_ssim)[0])
    return out, trace


# ---------------------------------------------------------------- outer loop


def view_schedule(n_views: int, cfg: LpgdConfig) -> list[int]:
    if cfg.view_schedule == "round_robin":
        return [k % n_views for k in range(cfg.e_total)]
    rng = SplitMix64(cfg.seed)
    return [rng.next_u64() % n_views for _ in range(cfg.e_total)]


def protect(
    scene: Scene,
    cameras: Sequence[Camera],
    objective: AttackObjective,
    models: Surrogates,
    cfg: LpgdConfig,
    callback: Callable[[IterRecord, np.ndarray, np.ndarray], None] | None = None,
    optimizer: Adam | None = None,
) -> tuple[Scene, TrainLog]:
    """Alternate gradient truncation and image-to-Gaussian fitting.

    A scene without safeguards is initialised according to ``cfg.init_mode``.
    ``callback(record, target, raw_image)`` sees every truncation target.
    """
    if not cameras:
        raise ValueError("protect needs at least one camera")
    if len(scene.safeguard) == 0:
        scene = initial_safeguard(scene, cameras, objective, models, cfg)
    if optimizer is None:
        optimizer = make_fit_optimizer(scene, cfg)
    raw_scene = scene.raw_only()
    raw_cache: dict[int, np.ndarray] = {}
    log = TrainLog()
    for k, v in enumerate(view_schedule(len(cameras), cfg)):
        cam = cameras[v]
        if v not in raw_cache:
            raw_cache[v] = render(raw_scene, cam)
        x_raw = raw_cache[v]
        x_k = render(scene, cam)
        target, trace = gradient_truncation(x_k, x_raw, objective, models, cfg)
        scene, fit_trace = image_to_gaussian_fit(scene, cam, target, cfg, optimizer)
        rec = IterRecord(
            iteration=k,
            view=v,
            adv_before=trace[0],
            adv_after=trace[-1],
            fit_loss=fit_trace[-1],
            target_linf=linf(target, x_raw),
            render_linf=linf(render(scene, cam), x_raw),
        )
        if not all(math.isfinite(x) for x in (rec.adv_before, rec.adv_after, rec.fit_loss)):
            raise FloatingPointError(f"non-finite loss at iteration {k}")
        log.records.append(rec)
        if callback is not None:
            callback(rec, target, x_raw)
    return scene, log


def initial_safeguard(
    scene: Scene,
    cameras: Sequence[Camera],
    objective: AttackObjective,
    models: Surrogates,
    cfg: LpgdConfig,
) -> Scene:
    """copy_raw: near-transparent copy of the raw set; from_fit2d: warm start
    from the Fit2D baseline run with the same config."""
    if cfg.init_mode == "copy_raw":
        return init_safeguard(scene, "copy_raw")
    from .baselines import fit2d

    donor, _ = fit2d(scene, cameras, objective, models, replace(cfg, init_mode="copy_raw"))
    return init_safeguard(scene, donor)


__all__ = [
    "Adam", "IterRecord", "LpgdConfig", "TrainLog", "ball_edges", "gradient_truncation", "image_to_gaussian_fit",
    "initial_safeguard", "make_fit_optimizer", "project_linf", "protect", "recon_loss", "view_schedule",
]
