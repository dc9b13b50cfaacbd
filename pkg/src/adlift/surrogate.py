"""Fixed random-weight stand-ins for a latent encoder and a box-prompted
segmenter, plus the three adversarial objectives and their input gradients.

Images are (H, W, 3) arrays in [0, 1]; internally the networks work on
(C, H, W). Every backward pass is the hand-written adjoint of its forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import read_lgim, write_lgim
from .rng import SplitMix64

ENCODER_CHANNELS = ((3, 8), (8, 16), (16, 4))
LOGIT_CLAMP = 30.0
DICE_EPS = 1.0


# ---------------------------------------------------------------- conv primitives


def _out_size(n: int) -> int:
    return (n - 1) // 2 + 1


def conv3x3_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1. x: (C, H, W), w: (O, C, 3, 3)."""
    c, h, wd = x.shape
    oh, ow = _out_size(h), _out_size(wd)
    xp = np.zeros((c, 2 * oh + 2, 2 * ow + 2))
    xp[:, 1 : h + 1, 1 : wd + 1] = x
    cols = np.empty((c, 3, 3, oh, ow))
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, ki : ki + 2 * oh : 2, kj : kj + 2 * ow : 2]
    out = w.reshape(w.shape[0], -1) @ cols.reshape(c * 9, oh * ow)
    return out.reshape(-1, oh, ow) + b[:, None, None]


def conv3x3_s2_adjoint(g: np.ndarray, w: np.ndarray, in_shape: tuple[int, int, int]) -> np.ndarray:
    """Transpose of ``conv3x3_s2`` in its input argument."""
    c, h, wd = in_shape
    o, oh, ow = g.shape
    cols = (w.reshape(o, -1).T @ g.reshape(o, oh * ow)).reshape(c, 3, 3, oh, ow)
    gp = np.zeros((c, 2 * oh + 2, 2 * ow + 2))
    for ki in range(3):
        for kj in range(3):
            gp[:, ki : ki + 2 * oh : 2, kj : kj + 2 * ow : 2] += cols[:, ki, kj]
    return gp[:, 1 : h + 1, 1 : wd + 1]


def _xavier(rng: SplitMix64, shape: tuple[int, ...]) -> np.ndarray:
    o, i = shape[0], shape[1]
    rf = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    bound = math.sqrt(6.0 / (i * rf + o * rf))
    return rng.uniform_array(int(np.prod(shape)), -bound, bound).reshape(shape)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------- networks


@dataclass(frozen=True, eq=False)
class SurrogateEncoder:
    """Three stride-2 3x3 convs (3->8->16->4), tanh after the first two."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", tuple(_readonly(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_readonly(b) for b in self.biases))

    @classmethod
    def zeros(cls) -> SurrogateEncoder:
        return cls(
            tuple(np.zeros((o, i, 3, 3)) for i, o in ENCODER_CHANNELS),
            tuple(np.zeros(o) for _, o in ENCODER_CHANNELS),
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Latent for a (3, H, W) input plus the activations the adjoint needs."""
        w, b = self.weights, self.biases
        t1 = np.tanh(conv3x3_s2(x, w[0], b[0]))
        t2 = np.tanh(conv3x3_s2(t1, w[1], b[1]))
        return conv3x3_s2(t2, w[2], b[2]), (x, t1, t2)

    def adjoint(self, cache: tuple, g: np.ndarray) -> np.ndarray:
        x, t1, t2 = cache
        g = conv3x3_s2_adjoint(g, self.weights[2], t2.shape) * (1.0 - t2 * t2)
        g = conv3x3_s2_adjoint(g, self.weights[1], t1.shape) * (1.0 - t1 * t1)
        return conv3x3_s2_adjoint(g, self.weights[0], x.shape)


@dataclass(frozen=True, eq=False)
class SegHead:
    """Encoder followed by a 1x1 conv (4->1); mask = logistic(logits)."""

    encoder: SurrogateEncoder
    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", _readonly(np.asarray(self.weight).reshape(4)))

    def logits(self, image: np.ndarray) -> tuple[np.ndarray, tuple]:
        z, cache = self.encoder.forward(_chw(image))
        return np.tensordot(self.weight, z, axes=1) + self.bias, cache

    def logits_adjoint(self, cache: tuple, g: np.ndarray) -> np.ndarray:
        gz = self.weight[:, None, None] * g[None]
        return _hwc(self.encoder.adjoint(cache, gz))


def build_encoder(seed: int) -> SurrogateEncoder:
    rng = SplitMix64(seed)
    ws = tuple(_xavier(rng, (o, i, 3, 3)) for i, o in ENCODER_CHANNELS)
    return SurrogateEncoder(ws, tuple(np.zeros(o) for _, o in ENCODER_CHANNELS))


def build_seghead(seed: int) -> SegHead:
    """Same stream as ``build_encoder``; the 1x1 weights are the next 4 draws."""
    rng = SplitMix64(seed)
    ws = tuple(_xavier(rng, (o, i, 3, 3)) for i, o in ENCODER_CHANNELS)
    enc = SurrogateEncoder(ws, tuple(np.zeros(o) for _, o in ENCODER_CHANNELS))
    return SegHead(enc, _xavier(rng, (1, 4)).reshape(4))


@dataclass(frozen=True)
class Surrogates:
    encoder: SurrogateEncoder
    seghead: SegHead

    @classmethod
    def from_seed(cls, seed: int) -> Surrogates:
        return cls(build_encoder(seed), build_seghead(seed))


def save_weights(enc: SurrogateEncoder, directory: str | Path) -> list[Path]:
    """One LGIM file per layer: height = out channels, width = in*9 weights
    followed by the bias."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        mat = np.concatenate([w.reshape(w.shape[0], -1), b[:, None]], axis=1)
        p = directory / f"encoder_layer{k}.lgim"
        write_lgim(p, mat[:, :, None])
        paths.append(p)
    return paths


def load_weights(directory: str | Path) -> SurrogateEncoder:
    directory = Path(directory)
    ws, bs = [], []
    for k, (i, o) in enumerate(ENCODER_CHANNELS):
        mat = read_lgim(directory / f"encoder_layer{k}.lgim")[:, :, 0]
        if mat.shape != (o, i * 9 + 1):
            raise ValueError(f"layer {k} has shape {mat.shape}, expected {(o, i * 9 + 1)}")
        ws.append(mat[:, :-1].reshape(o, i, 3, 3))
        bs.append(mat[:, -1])
    return SurrogateEncoder(tuple(ws), tuple(bs))


# ---------------------------------------------------------------- helpers


def _chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return image.transpose(2, 0, 1)


def _hwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def latent_shape(height: int, width: int) -> tuple[int, int]:
    return -(-height // 8), -(-width // 8)


def encode(enc: SurrogateEncoder, image: np.ndarray) -> np.ndarray:
    return enc.forward(_chw(image))[0]


def encode_backward(enc: SurrogateEncoder, image: np.ndarray, dl_dz: np.ndarray) -> np.ndarray:
    z, cache = enc.forward(_chw(image))
    if np.shape(dl_dz) != z.shape:
        raise ValueError(f"dl_dz has shape {np.shape(dl_dz)}, expected {z.shape}")
    return _hwc(enc.adjoint(cache, np.asarray(dl_dz, dtype=np.float64)))


# ---------------------------------------------------------------- objectives


def loss_vu(image: np.ndarray, raw_image: np.ndarray, enc: SurrogateEncoder) -> tuple[float, np.ndarray]:
    """Negated squared latent distance from the raw render's encoding."""
    _same_shape(image, raw_image)
    z, cache = enc.forward(_chw(image))
    diff = z - encode(enc, raw_image)
    return -float(np.sum(diff * diff)), _hwc(enc.adjoint(cache, -2.0 * diff))


def loss_vt(image: np.ndarray, target_image: np.ndarray, enc: SurrogateEncoder) -> tuple[float, np.ndarray]:
    """Squared latent distance to a target image's encoding."""
    _same_shape(image, target_image)
    z, cache = enc.forward(_chw(image))
    diff = z - encode(enc, target_image)
    return float(np.sum(diff * diff)), _hwc(enc.adjoint(cache, 2.0 * diff))


def _check_box(box: Sequence[int], shape: tuple[int, int]) -> tuple[int, int, int, int]:
    x, y, w, h = (int(v) for v in box)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > shape[1] or y + h > shape[0]:
        raise ValueError(f"box {tuple(box)} outside latent grid {shape}")
    return x, y, w, h


def predict_mask(seg: SegHead, image: np.ndarray, box: Sequence[int] | None = None) -> np.ndarray:
    """Mask probabilities on the latent grid. ``box`` (x, y, w, h) is only
    validated here; losses restrict themselves to it."""
    z, _ = seg.logits(image)
    if box is not None:
        _check_box(box, z.shape)
    return 1.0 / (1.0 + np.exp(-z))


def st_loss_from_logits(
    logits: np.ndarray, box: Sequence[int], target_mask: np.ndarray, lambda_dice: float = 1.0
) -> tuple[float, np.ndarray]:
    """BCE (mean) + lambda * Dice over the box, with gradient w.r.t. logits."""
    target_mask = np.asarray(target_mask, dtype=np.float64)
    if target_mask.shape != logits.shape:
        raise ValueError(f"target mask shape {target_mask.shape} != mask shape {logits.shape}")
    if not np.all((target_mask == 0.0) | (target_mask == 1.0)):
        raise ValueError("target mask must be binary")
    if lambda_dice < 0:
        raise ValueError("lambda_dice must be non-negative")
    x, y, w, h = _check_box(box, logits.shape)
    sl = (slice(y, y + h), slice(x, x + w))
    z = logits[sl]
    m = target_mask[sl]
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    live = (z >= -LOGIT_CLAMP) & (z <= LOGIT_CLAMP)
    p = 1.0 / (1.0 + np.exp(-zc))
    n = z.size
    # softplus(z) - m*z == -[m log p + (1-m) log(1-p)]
    bce = float(np.mean(np.logaddexp(0.0, zc) - m * zc))
    g = (p - m) / n
    num = 2.0 * np.sum(p * m) + DICE_EPS
    den = np.sum(p) + np.sum(m) + DICE_EPS
    dice = 1.0 - num / den
    if lambda_dice:
        g = g + lambda_dice * (-(2.0 * m * den - num) / den**2) * p * (1.0 - p)
    grad = np.zeros_like(logits)
    grad[sl] = np.where(live, g, 0.0)
    return bce + lambda_dice * float(dice), grad


def loss_st(
    image: np.ndarray,
    seg: SegHead,
    box: Sequence[int],
    target_mask: np.ndarray,
    lambda_dice: float = 1.0,
) -> tuple[float, np.ndarray]:
    z, cache = seg.logits(image)
    value, gz = st_loss_from_logits(z, box, target_mask, lambda_dice)
    return value, seg.logits_adjoint(cache, gz)


# ---------------------------------------------------------------- objective specs


@dataclass(frozen=True, eq=False)
class AttackObjective:
    """Which adversarial loss to minimise.

    kind "vu": push the latent away from the raw render's;
    kind "vt": pull the latent toward ``target_image``'s;
    kind "st": drive the box-restricted mask toward ``target_mask``.
    """

    kind: str = "vu"
    target_image: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    box: tuple[int, int, int, int] | None = None
    lambda_dice: float = 1.0
    _target_latent: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("vu", "vt", "st"):
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == "vt" and self.target_image is None:
            raise ValueError("vt objective needs a target image")
        if self.kind == "st":
            if self.target_mask is None or self.box is None:
                raise ValueError("st objective needs a target mask and a box")
            tm = np.asarray(self.target_mask, dtype=np.float64)
            if not np.all((tm == 0.0) | (tm == 1.0)):
                raise ValueError("target mask must be binary")
            _check_box(self.box, tm.shape)
            object.__setattr__(self, "target_mask", tm)
            object.__setattr__(self, "box", tuple(int(v) for v in self.box))

    @classmethod
    def vu(cls) -> AttackObjective:
        return cls("vu")

    @classmethod
    def vt(cls, target_image: np.ndarray) -> AttackObjective:
        return cls("vt", target_image=np.asarray(target_image, dtype=np.float64))

    @classmethod
    def st(cls, target_mask: np.ndarray, box: Sequence[int], lambda_dice: float = 1.0) -> AttackObjective:
        return cls("st", target_mask=target_mask, box=tuple(box), lambda_dice=lambda_dice)

    def describe(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "st":
            d.update(box=list(self.box), lambda_dice=self.lambda_dice)
        return d


def adv_loss(
    objective: AttackObjective, models: Surrogates, image: np.ndarray, raw_image: np.ndarray
) -> tuple[float, np.ndarray]:
    """Adversarial loss (lower = stronger attack) and its image gradient."""
    if objective.kind == "vu":
        return loss_vu(image, raw_image, models.encoder)
    if objective.kind == "vt":
        if objective.target_image.shape != np.shape(image):
            raise ValueError("vt target image must match the view size")
        return loss_vt(image, objective.target_image, models.encoder)
    return loss_st(image, models.seghead, objective.box, objective.target_mask, objective.lambda_dice)


def adv_value(objective: AttackObjective, models: Surrogates, image: np.ndarray, raw_image: np.ndarray) -> float:
    return adv_loss(objective, models, image, raw_image)[0]


__all__ = [
    "AttackObjective", "SegHead", "SurrogateEncoder", "Surrogates", "adv_loss", "adv_value",
    "build_encoder", "build_seghead", "encode", "encode_backward", "latent_shape", "load_weights",
    "loss_st", "loss_vt", "loss_vu", "predict_mask", "save_weights", "st_loss_from_logits",
]
