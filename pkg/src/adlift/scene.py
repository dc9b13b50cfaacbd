"""Gaussian primitives, scenes, cameras, and their file formats."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import SplitMix64

RECORD_WIDTH = 14
SCENE_FORMAT_VERSION = 1
SAFEGUARD_OPACITY_SHIFT = -4.0
SH_C0 = 0.28209479177387814


class SceneFormatError(ValueError):
    """Malformed scene or camera file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))


@dataclass(frozen=True, eq=False)
class Gaussians:
    """Structure-of-arrays set of Gaussians.

    Rotations are (w, x, y, z) quaternions; colors are degree-0 RGB.
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.opacity_logit)
        shapes = {
            "position": (n, 3),
            "log_scale": (n, 3),
            "rotation": (n, 4),
            "color": (n, 3),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "opacity_logit", _frozen(np.asarray(self.opacity_logit).reshape(n)))

    @classmethod
    def empty(cls) -> Gaussians:
        return cls.from_records(np.zeros((0, RECORD_WIDTH)))

    @classmethod
    def from_records(cls, records: np.ndarray) -> Gaussians:
        r = np.asarray(records, dtype=np.float64).reshape(-1, RECORD_WIDTH)
        return cls(r[:, 0:3], r[:, 3:6], r[:, 6:10], r[:, 10:13], r[:, 13])

    @classmethod
    def from_list(cls, items: Iterable[Gaussian]) -> Gaussians:
        rows = [
            np.concatenate([g.position, g.log_scale, g.rotation, g.color, [g.opacity_logit]])
            for g in items
        ]
        return cls.from_records(np.array(rows).reshape(-1, RECORD_WIDTH))

    def to_records(self) -> np.ndarray:
        return np.concatenate(
            [self.position, self.log_scale, self.rotation, self.color, self.opacity_logit[:, None]],
            axis=1,
        )

    def __len__(self) -> int:
        return len(self.opacity_logit)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.position[i], self.log_scale[i], self.rotation[i], self.color[i],
            float(self.opacity_logit[i]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Gaussians):
            return NotImplemented
        return self.to_records().tobytes() == other.to_records().tobytes()

    def replace(self, **arrays: np.ndarray) -> Gaussians:
        kw = {k: getattr(self, k) for k in ("position", "log_scale", "rotation", "color", "opacity_logit")}
        kw.update(arrays)
        return Gaussians(**kw)


@dataclass(frozen=True, eq=False)
class Scene:
    """Frozen raw Gaussians plus trainable safeguard Gaussians.

    Rendering composites both sets in a single depth order; raw Gaussians
    occupy joint indices ``0..len(raw)-1`` and safeguards follow.
    """

    raw: Gaussians
    safeguard: Gaussians = field(default_factory=Gaussians.empty)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "background", _frozen(np.asarray(self.background).reshape(3)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.raw == other.raw
            and self.safeguard == other.safeguard
            and self.background.tobytes() == other.background.tobytes()
        )

    def with_safeguard(self, safeguard: Gaussians) -> Scene:
        return Scene(self.raw, safeguard, self.background)

    def raw_only(self) -> Scene:
        return Scene(self.raw, Gaussians.empty(), self.background)

    def joint(self) -> Gaussians:
        return Gaussians.from_records(
            np.concatenate([self.raw.to_records(), self.safeguard.to_records()])
        )


@dataclass(frozen=True, eq=False)
class Camera:
    rotation_wc: np.ndarray
    translation_wc: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    znear: float = 0.01

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation_wc, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation_wc must be a proper rotation matrix")
        if self.width < 8 or self.height < 8:
            raise ValueError("camera must be at least 8x8 pixels")
        if self.znear <= 0:
            raise ValueError("znear must be positive")
        object.__setattr__(self, "rotation_wc", _frozen(R))
        object.__setattr__(self, "translation_wc", _frozen(np.asarray(self.translation_wc).reshape(3)))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation_wc.T @ self.translation_wc

    def to_dict(self) -> dict:
        return {
            "rotation_wc": self.rotation_wc.tolist(),
            "translation_wc": self.translation_wc.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "znear": self.znear,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(
            np.array(d["rotation_wc"]), np.array(d["translation_wc"]),
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), float(d.get("znear", 0.01)),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(json.dumps(self.to_dict(), sort_keys=True))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _random_quaternion(rng: SplitMix64) -> list[float]:
    # Shoemake's uniform rotation sampling.
    u1, u2, u3 = rng.uniform(), rng.uniform(), rng.uniform()
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    t2, t3 = 2.0 * math.pi * u2, 2.0 * math.pi * u3
    q = np.array([b * math.cos(t3), a * math.sin(t2), a * math.cos(t2), b * math.sin(t3)])
    return list(q / np.linalg.norm(q))


def make_synthetic_scene(
    n: int, seed: int, spread: float = 1.0, background: Sequence[float] = (0.0, 0.0, 0.0)
) -> Scene:
    """Random raw scene; per Gaussian the stream yields position, log-scale,
    quaternion (3 draws), color, then opacity logit."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = SplitMix64(seed)
    lo_s, hi_s = math.log(0.02 * spread), math.log(0.15 * spread)
    rows = []
    for _ in range(n):
        pos = [rng.uniform_range(-spread, spread) for _ in range(3)]
        ls = [rng.uniform_range(lo_s, hi_s) for _ in range(3)]
        q = _random_quaternion(rng)
        col = [rng.uniform_range(0.1, 0.9) for _ in range(3)]
        op = rng.uniform_range(0.0, 3.0)
        rows.append(pos + ls + q + col + [op])
    return Scene(Gaussians.from_records(np.array(rows)), Gaussians.empty(), np.asarray(background, float))


def look_at(eye: np.ndarray, target: np.ndarray = np.zeros(3), up: np.ndarray = np.array([0.0, 0.0, 1.0])):
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    Camera axes: +x right, +y down, +z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # re-orthonormalize to keep the 1e-9 invariant tight
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return R, -R @ eye


def make_camera_ring(
    n_cams: int, radius: float, height: float, image_size: int, fov_deg: float, znear: float = 0.01
) -> list[Camera]:
    if n_cams < 2:
        raise ValueError("n_cams must be >= 2")
    if not 10.0 <= fov_deg <= 120.0:
        raise ValueError("fov_deg must lie in [10, 120]")
    f = (image_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for k in range(n_cams):
        theta = 2.0 * math.pi * k / n_cams
        eye = np.array([radius * math.cos(theta), radius * math.sin(theta), height])
        R, t = look_at(eye)
        cams.append(Camera(R, t, f, f, image_size / 2.0, image_size / 2.0, image_size, image_size, znear))
    return cams


def split_train_novel(cameras: Sequence[Camera], every: int = 3) -> tuple[list[Camera], list[Camera]]:
    """Hold out every ``every``-th camera (indices 2, 5, 8, ... for every=3)."""
    train = [c for i, c in enumerate(cameras) if i % every != every - 1]
    novel = [c for i, c in enumerate(cameras) if i % every == every - 1]
    return train, novel


def init_safeguard(scene: Scene, mode: str | Scene = "copy_raw") -> Scene:
    """Initialise safeguard Gaussians.

    ``"copy_raw"`` copies the raw set with opacity logits shifted by -4 so the
    first render barely differs from the raw one. Passing a donor ``Scene``
    (usually a Fit2D result) adopts its safeguard set instead.
    """
    if isinstance(mode, Scene):
        if mode.raw != scene.raw:
            raise ValueError("donor scene has a different raw Gaussian set")
        return scene.with_safeguard(mode.safeguard)
    if mode != "copy_raw":
        raise ValueError(f"unknown init mode {mode!r}")
    if len(scene.safeguard):
        raise ValueError("copy_raw requires an empty safeguard set")
    raw = scene.raw
    sg = raw.replace(opacity_logit=raw.opacity_logit + SAFEGUARD_OPACITY_SHIFT)
    return scene.with_safeguard(sg)


# ---------------------------------------------------------------- file formats


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _records_text(records: np.ndarray) -> str:
    if len(records) == 0:
        return "[]"
    rows = ["    [" + ", ".join(_fmt(v) for v in row) + "]" for row in records]
    return "[\n" + ",\n".join(rows) + "\n  ]"


def dumps_scene(scene: Scene) -> str:
    return (
        "{\n"
        f'  "version": {SCENE_FORMAT_VERSION},\n'
        f'  "background": [{", ".join(_fmt(v) for v in scene.background)}],\n'
        f'  "raw": {_records_text(scene.raw.to_records())},\n'
        f'  "safeguard": {_records_text(scene.safeguard.to_records())}\n'
        "}\n"
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="ascii")


def _parse_records(value, key: str, offset: int) -> tuple[np.ndarray, bool]:
    if not isinstance(value, list):
        raise SceneFormatError(f"{key!r} must be an array", offset)
    for row in value:
        if (
            not isinstance(row, list)
            or len(row) != RECORD_WIDTH
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
        ):
            raise SceneFormatError(f"{key!r} entries must be {RECORD_WIDTH}-number records", offset)
    rec = np.array(value, dtype=np.float64).reshape(-1, RECORD_WIDTH)
    if not np.all(np.isfinite(rec)):
        raise SceneFormatError(f"non-finite value in {key!r}", offset)
    norms = np.linalg.norm(rec[:, 6:10], axis=1)
    if np.any(norms == 0):
        raise SceneFormatError(f"zero quaternion in {key!r}", offset)
    fixed = False
    bad = np.abs(norms - 1.0) > 1e-9
    if np.any(bad):
        rec[bad, 6:10] /= norms[bad, None]
        fixed = True
    return rec, fixed


def loads_scene(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    end = len(text.encode("utf-8"))
    if not isinstance(doc, dict):
        raise SceneFormatError("top level must be an object", 0)
    for key in ("version", "background", "raw", "safeguard"):
        if key not in doc:
            raise SceneFormatError(f"missing key {key!r}", end)
    if doc["version"] != SCENE_FORMAT_VERSION:
        raise SceneFormatError(f"unsupported version {doc['version']!r}", text.find('"version"'))
    bg = doc["background"]
    if not (isinstance(bg, list) and len(bg) == 3 and all(isinstance(v, (int, float)) for v in bg)):
        raise SceneFormatError("background must be 3 numbers", text.find('"background"'))
    raw, fix_r = _parse_records(doc["raw"], "raw", text.find('"raw"'))
    sg, fix_s = _parse_records(doc["safeguard"], "safeguard", text.find('"safeguard"'))
    notes = ()
    if fix_r or fix_s:
        notes = ("renormalized non-unit quaternions",)
        warnings.warn("scene file contained non-unit quaternions; renormalized", stacklevel=3)
    return Scene(Gaussians.from_records(raw), Gaussians.from_records(sg), np.array(bg, float), notes)


def load_scene(path: str | Path) -> Scene:
    data = Path(path).read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SceneFormatError("file is not valid UTF-8 text", exc.start) from None
    return loads_scene(text)


def save_cameras(cameras: Sequence[Camera], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path: str | Path) -> list[Camera]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(exc.msg, exc.pos) from None
    if not isinstance(doc, list) or not doc:
        raise SceneFormatError("camera file must be a non-empty array", 0)
    try:
        return [Camera.from_dict(d) for d in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad camera record: {exc}", 0) from None


# ---------------------------------------------------------------- PLY

_PLY_PROPS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
)
_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def save_ply(gaussians: Gaussians, path: str | Path) -> None:
    """Write a binary PLY in the usual 3DGS export layout (float32, no SH rest)."""
    n = len(gaussians)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header.append("end_header")
    dtype = np.dtype([(p, "<f4") for p in _PLY_PROPS])
    arr = np.zeros(n, dtype=dtype)
    for i, p in enumerate("xyz"):
        arr[p] = gaussians.position[:, i]
    for i in range(3):
        arr[f"scale_{i}"] = gaussians.log_scale[:, i]
        arr[f"f_dc_{i}"] = (gaussians.color[:, i] - 0.5) / SH_C0
    for i in range(4):
        arr[f"rot_{i}"] = gaussians.rotation[:, i]
    arr["opacity"] = gaussians.opacity_logit
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def load_ply(path: str | Path, background: Sequence[float] = (0.0, 0.0, 0.0)) -> Scene:
    """Import a binary-little-endian 3DGS PLY as the raw set of a new scene.

    ``f_dc_*`` are degree-0 SH coefficients and are converted to RGB via
    ``0.5 + C0 * f_dc``; any higher-order SH properties are ignored.
    """
    data = Path(path).read_bytes()
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise SceneFormatError("missing PLY header", 0)
    lines = data[: end].decode("ascii", errors="replace").splitlines()
    body_start = end + len(marker)
    fields: list[tuple[str, str]] = []
    count = None
    in_vertex = False
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise SceneFormatError(f"unsupported PLY format {tok[1]}", data.find(b"format"))
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                raise SceneFormatError(f"unsupported property type {tok[1]}", data.find(line.encode()))
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    if count is None:
        raise SceneFormatError("no vertex element", 0)
    names = {f for f, _ in fields}
    missing = [p for p in _PLY_PROPS if p not in names]
    if missing:
        raise SceneFormatError(f"missing vertex properties {missing}", 0)
    dtype = np.dtype(fields)
    need = body_start + count * dtype.itemsize
    if len(data) < need:
        raise SceneFormatError("truncated vertex data", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    rec = np.zeros((count, RECORD_WIDTH))
    for i, p in enumerate("xyz"):
        rec[:, i] = arr[p]
    for i in range(3):
        rec[:, 3 + i] = arr[f"scale_{i}"]
        rec[:, 10 + i] = 0.5 + SH_C0 * arr[f"f_dc_{i}"].astype(np.float64)
    for i in range(4):
        rec[:, 6 + i] = arr[f"rot_{i}"]
    rec[:, 13] = arr["opacity"]
    norms = np.linalg.norm(rec[:, 6:10], axis=1)
    if np.any(norms == 0):
        raise SceneFormatError("zero quaternion in PLY", body_start)
    rec[:, 6:10] /= norms[:, None]
    return Scene(Gaussians.from_records(rec), Gaussians.empty(), np.asarray(background, float))


def bundled_scene() -> Scene:
    """The 50-Gaussian reference scene used by the acceptance suite."""
    return make_synthetic_scene(50, seed=7, spread=1.0, background=(0.5, 0.5, 0.5))


def bundled_cameras(n_cams: int = 8, image_size: int = 64) -> list[Camera]:
    return make_camera_ring(n_cams, radius=3.0, height=1.0, image_size=image_size, fov_deg=50.0)


__all__ = [
    "Camera", "Gaussian", "Gaussians", "Scene", "SceneFormatError",
    "bundled_cameras", "bundled_scene", "init_safeguard", "load_cameras", "load_ply",
    "load_scene", "look_at", "make_camera_ring", "make_synthetic_scene", "quat_normalize",
    "save_cameras", "save_ply", "save_scene", "split_train_novel",
]
