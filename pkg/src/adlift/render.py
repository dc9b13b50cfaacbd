"""Differentiable splatting renderer.

Forward: project every Gaussian (raw and safeguard jointly), sort by camera
depth, alpha-composite front to back. Backward: exact gradients of the
composited image with respect to the safeguard parameters only.

All arithmetic is float64. Pixel (col, row) is sampled at integer coordinates.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _raster
from ._raster import ALPHA_MAX, ALPHA_MIN, T_MIN
from .scene import Camera, Gaussian, Gaussians, Scene

COV_DILATION = 0.3
TILE = 16
PARAM_SLICES = {
    "position": slice(0, 3),
    "log_scale": slice(3, 6),
    "rotation": slice(6, 10),
    "color": slice(10, 13),
    "opacity_logit": slice(13, 14),
}

_threads = max(1, os.cpu_count() or 1)


def set_threads(n: int) -> None:
    """Worker threads used for tile-parallel forward/backward passes."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int
    is_safeguard: bool


@dataclass
class ParamGrads:
    """Per-safeguard gradients, one row per Gaussian in record order
    (position 3, log_scale 3, rotation 4, color 3, opacity_logit 1)."""

    records: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    def __getattr__(self, name: str) -> np.ndarray:
        if name in PARAM_SLICES:
            out = self.records[:, PARAM_SLICES[name]]
            return out[:, 0] if name == "opacity_logit" else out
        raise AttributeError(name)

    @classmethod
    def zeros(cls, n: int) -> ParamGrads:
        return cls(np.zeros((n, 14)))


# ---------------------------------------------------------------- geometry


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def _rotmat_vjp(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. unit quaternion components given dL/dR (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], -1)


@dataclass
class Projection:
    """Projected splats for one view, arrays indexed by joint Gaussian index."""

    t_cam: np.ndarray  # (N, 3)
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2) dilated
    conic: np.ndarray  # (N, 3) a, b, c of the inverse
    opacity: np.ndarray
    color: np.ndarray  # clamped to [0, 1]
    radius: np.ndarray  # 0 for culled / never-visible splats
    visible: np.ndarray  # in front of znear
    # cached intermediates for the backward pass
    rot: np.ndarray
    scale: np.ndarray
    qhat: np.ndarray
    qnorm: np.ndarray
    sigma3: np.ndarray
    jw: np.ndarray


def project(g: Gaussians, cam: Camera) -> Projection:
    n = len(g)
    W = cam.rotation_wc
    t = g.position @ W.T + cam.translation_wc
    tz = t[:, 2]
    visible = tz > cam.znear
    tzs = np.where(visible, tz, 1.0)
    mean2d = np.stack([cam.fx * t[:, 0] / tzs + cam.cx, cam.fy * t[:, 1] / tzs + cam.cy], -1)

    qnorm = np.linalg.norm(g.rotation, axis=1)
    qhat = g.rotation / qnorm[:, None]
    rot = quat_to_rotmat(qhat)
    scale = np.exp(g.log_scale)
    m = rot * scale[:, None, :]
    sigma3 = m @ m.transpose(0, 2, 1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tzs
    J[:, 0, 2] = -cam.fx * t[:, 0] / tzs**2
    J[:, 1, 1] = cam.fy / tzs
    J[:, 1, 2] = -cam.fy * t[:, 1] / tzs**2
    jw = J @ W
    cov2d = jw @ sigma3 @ jw.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], -1)

    opacity = 1.0 / (1.0 + np.exp(-g.opacity_logit))
    color = np.clip(g.color, 0.0, 1.0)
    lam_max = 0.5 * (A + C) + np.sqrt(np.maximum(0.25 * (A - C) ** 2 + B * B, 0.0))
    reach = np.log(np.maximum(255.0 * opacity, 1.0))
    radius = np.sqrt(2.0 * reach * lam_max) * (1.0 + 1e-6) + 1e-6
    radius = np.where(visible & (opacity >= ALPHA_MIN), radius, 0.0)
    return Projection(t, mean2d, cov2d, conic, opacity, color, radius, visible,
                      rot, scale, qhat, qnorm, sigma3, jw)


def project_gaussian(g: Gaussian, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; ``None`` when it lies at or behind the near plane."""
    p = project(Gaussians.from_list([g]), cam)
    if not p.visible[0]:
        return None
    return Splat2D(p.mean2d[0], p.cov2d[0], float(p.t_cam[0, 2]), 0, False)


def depth_order(proj: Projection) -> np.ndarray:
    """Front-to-back order of visible splats; ties broken by joint index."""
    idx = np.nonzero(proj.visible)[0]
    return idx[np.lexsort((idx, proj.t_cam[idx, 2]))]


# ---------------------------------------------------------------- raster


def _tile_count(cam: Camera) -> int:
    return ((cam.width + TILE - 1) // TILE) * ((cam.height + TILE - 1) // TILE)


def _run_tiles(fn: Callable[[int, int], None], n_tiles: int) -> None:
    k = min(_threads, n_tiles)
    if k <= 1:
        fn(0, n_tiles)
        return
    bounds = [round(i * n_tiles / k) for i in range(k + 1)]
    with ThreadPoolExecutor(max_workers=k) as pool:
        list(pool.map(lambda i: fn(bounds[i], bounds[i + 1]), range(k)))


@dataclass
class Frame:
    """Forward-pass result: unclamped composite, transmittance, and the
    sorted projection it came from."""

    proj: Projection
    order: np.ndarray
    composite: np.ndarray
    t_final: np.ndarray
    n_contrib: np.ndarray

    @property
    def image(self) -> np.ndarray:
        return np.clip(self.composite, 0.0, 1.0)


def _sorted_arrays(proj: Projection, order: np.ndarray):
    return (
        np.ascontiguousarray(proj.mean2d[order]),
        np.ascontiguousarray(proj.conic[order]),
        np.ascontiguousarray(proj.opacity[order]),
        np.ascontiguousarray(proj.color[order]),
        np.ascontiguousarray(proj.radius[order]),
    )


def rasterize(scene: Scene, cam: Camera) -> Frame:
    proj = project(scene.joint(), cam)
    order = depth_order(proj)
    means, conics, opac, colors, radii = _sorted_arrays(proj, order)
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    t_final = np.ones((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    bg = np.asarray(scene.background, dtype=np.float64)
    _run_tiles(
        lambda a, b: _raster.forward_tiles(a, b, TILE, W, H, means, conics, opac, colors, radii,
                                           bg, image, t_final, n_contrib),
        _tile_count(cam),
    )
    return Frame(proj, order, image, t_final, n_contrib)


def render(scene: Scene, cam: Camera) -> np.ndarray:
    """Render ``scene`` from ``cam`` as an (H, W, 3) image in [0, 1]."""
    return rasterize(scene, cam).image


def blend_weights(scene: Scene, cam: Camera, px: int, py: int) -> tuple[np.ndarray, float]:
    """Per-Gaussian blend weights (joint index order) and final transmittance at one pixel."""
    proj = project(scene.joint(), cam)
    order = depth_order(proj)
    means, conics, opac, _, radii = _sorted_arrays(proj, order)
    w_sorted, T = _raster.weights_at_pixel(float(px), float(py), means, conics, opac, radii)
    w = np.zeros(len(proj.opacity))
    w[order] = w_sorted
    return w, T


def render_backward(scene: Scene, cam: Camera, dl_dc: np.ndarray, frame: Frame | None = None) -> ParamGrads:
    """Gradient of ``sum(dl_dc * render(scene, cam))`` w.r.t. safeguard parameters.

    Quaternion gradients are in the ambient 4-vector (the forward pass
    normalises internally, so they are tangent to the unit sphere at the
    stored quaternion's direction).
    """
    dl_dc = np.asarray(dl_dc, dtype=np.float64)
    if dl_dc.shape != (cam.height, cam.width, 3):
        raise ValueError(f"dl_dc has shape {dl_dc.shape}, expected {(cam.height, cam.width, 3)}")
    n_raw, n_sg = len(scene.raw), len(scene.safeguard)
    if n_sg == 0:
        return ParamGrads.zeros(0)
    if frame is None:
        frame = rasterize(scene, cam)
    proj, order = frame.proj, frame.order
    # final clamp to [0, 1] passes gradient only where it was inactive
    live = (frame.composite >= 0.0) & (frame.composite <= 1.0)
    g_img = np.ascontiguousarray(np.where(live, dl_dc, 0.0))

    means, conics, opac, colors, radii = _sorted_arrays(proj, order)
    H, W = cam.height, cam.width
    n_tiles = _tile_count(cam)
    partial = np.zeros((n_tiles, len(order), 9))
    bg = np.asarray(scene.background, dtype=np.float64)
    _run_tiles(
        lambda a, b: _raster.backward_tiles(a, b, TILE, W, H, means, conics, opac, colors, radii,
                                            bg, g_img, partial),
        n_tiles,
    )
    acc_sorted = np.zeros((len(order), 9))
    for t in range(n_tiles):
        acc_sorted += partial[t]
    acc = np.zeros((n_raw + n_sg, 9))
    acc[order] = acc_sorted
    return _chain_to_params(scene.safeguard, cam, proj, acc[n_raw:], n_raw)


def _chain_to_params(g: Gaussians, cam: Camera, proj: Projection, acc: np.ndarray, off: int) -> ParamGrads:
    sl = slice(off, off + len(g))
    t = proj.t_cam[sl]
    vis = proj.visible[sl]
    tz = np.where(vis, t[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    W = cam.rotation_wc

    g_mean = acc[:, 0:2]
    ga, gb, gc = acc[:, 2], acc[:, 3], acc[:, 4]
    g_op = acc[:, 5]
    g_col = acc[:, 6:9]

    out = np.zeros((len(g), 14))
    in_range = (g.color >= 0.0) & (g.color <= 1.0)
    out[:, 10:13] = np.where(in_range, g_col, 0.0)
    o = proj.opacity[sl]
    out[:, 13] = g_op * o * (1.0 - o)

    # conic -> 2D covariance
    K = np.empty((len(g), 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = (
        proj.conic[sl, 0], proj.conic[sl, 1], proj.conic[sl, 1], proj.conic[sl, 2])
    GK = np.empty_like(K)
    GK[:, 0, 0], GK[:, 0, 1], GK[:, 1, 0], GK[:, 1, 1] = ga, 0.5 * gb, 0.5 * gb, gc
    G2 = -K @ GK @ K

    jw = proj.jw[sl]
    sigma = proj.sigma3[sl]
    g_sigma = jw.transpose(0, 2, 1) @ G2 @ jw
    g_jw = 2.0 * G2 @ jw @ sigma
    g_J = g_jw @ W.T

    g_t = np.zeros((len(g), 3))
    g_t[:, 0] = g_mean[:, 0] * fx / tz - g_J[:, 0, 2] * fx / tz**2
    g_t[:, 1] = g_mean[:, 1] * fy / tz - g_J[:, 1, 2] * fy / tz**2
    g_t[:, 2] = (
        -g_mean[:, 0] * fx * t[:, 0] / tz**2
        - g_mean[:, 1] * fy * t[:, 1] / tz**2
        - g_J[:, 0, 0] * fx / tz**2
        + g_J[:, 0, 2] * 2.0 * fx * t[:, 0] / tz**3
        - g_J[:, 1, 1] * fy / tz**2
        + g_J[:, 1, 2] * 2.0 * fy * t[:, 1] / tz**3
    )
    out[:, 0:3] = g_t @ W

    rot, scale = proj.rot[sl], proj.scale[sl]
    m = rot * scale[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_rot = g_m * scale[:, None, :]
    g_scale = np.einsum("nij,nij->nj", g_m, rot)
    out[:, 3:6] = g_scale * scale

    qhat, qn = proj.qhat[sl], proj.qnorm[sl]
    g_qhat = _rotmat_vjp(qhat, g_rot)
    out[:, 6:10] = (g_qhat - qhat * np.sum(qhat * g_qhat, axis=1, keepdims=True)) / qn[:, None]

    out[~vis] = 0.0
    return ParamGrads(out)


def finite_diff_grads(
    scene: Scene,
    cam: Camera,
    loss_on_image: Callable[[np.ndarray], float],
    step: float = 1e-5,
) -> ParamGrads:
    """Central-difference gradients of ``loss_on_image(render(scene', cam))``
    with each safeguard parameter perturbed by +/- ``step``."""
    if step <= 0:
        raise ValueError("step must be positive")
    rec = scene.safeguard.to_records()
    out = np.zeros_like(rec)
    for i in range(rec.shape[0]):
        for j in range(rec.shape[1]):
            vals = []
            for s in (step, -step):
                r = rec.copy()
                r[i, j] += s
                vals.append(loss_on_image(render(scene.with_safeguard(Gaussians.from_records(r)), cam)))
            out[i, j] = (vals[0] - vals[1]) / (2.0 * step)
    return ParamGrads(out)


__all__ = [
    "ALPHA_MAX", "ALPHA_MIN", "COV_DILATION", "Frame", "ParamGrads", "Projection", "Splat2D",
    "T_MIN", "TILE", "blend_weights", "depth_order", "finite_diff_grads", "get_threads", "project",
    "project_gaussian", "quat_to_rotmat", "rasterize", "render", "render_backward", "set_threads",
]
