"""``adlift`` command line: scene generation, protection, baselines,
evaluation, sweeps, and rendering.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Settings resolve as defaults < ``--config`` file < command-line flags, and the
resolved set is written to ``<out>/config.resolved`` (loadable via ``--config``).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import render as render_mod
from .baselines import SoftConfig, fit2d, soft_constraint_protect
from .evaluation import SWEEP_AXES, evaluate, sweep
from .imageio import read_lgim, read_ppm, write_lgim, write_ppm
from .lpgd import LpgdConfig, initial_safeguard, protect
from .scene import (
    Scene,
    SceneFormatError,
    load_cameras,
    load_scene,
    make_camera_ring,
    make_synthetic_scene,
    save_cameras,
    save_scene,
    split_train_novel,
)
from .surrogate import AttackObjective, Surrogates, latent_shape


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # scene / cameras
    n: int = 50
    seed: int = 7
    spread: float = 1.0
    background: float = 0.5
    n_cams: int = 8
    radius: float = 3.0
    height: float = 1.0
    image_size: int = 64
    fov: float = 50.0
    holdout_every: int = 3
    # surrogates and objective
    surrogate_seed: int = 0
    objective: str = "vu"
    target_image: str | None = None
    target_mask: str | None = None
    box: str | None = None
    lambda_dice: float = 1.0
    # L-PGD
    eta: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    beta: float = LpgdConfig.beta
    kp: int = 10
    kl: int = 50
    iters: int = 400
    lambda_ssim: float = 0.0
    view_schedule: str = "round_robin"
    variant: str = "adlift"
    # baselines / sweeps
    kind: str = "fit2d"
    soft_w: float = 1.0
    soft_lr: float = 1e-2
    soft_steps: int = 200
    axis: str = "eta"
    values: str = "0.0157,0.0314,0.0627"
    # io
    scene: str | None = None
    cams: str | None = None
    out: str | None = None
    threads: int = 0

    def lpgd(self) -> LpgdConfig:
        try:
            return LpgdConfig(
                eta=self.eta, alpha=self.alpha, beta=self.beta, k_p=self.kp, k_l=self.kl, e_total=self.iters,
                lambda_ssim=self.lambda_ssim, seed=self.seed,
                init_mode="from_fit2d" if self.variant == "adlift-star" else "copy_raw",
                view_schedule=self.view_schedule,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def soft(self) -> SoftConfig:
        try:
            return SoftConfig(weight_w=self.soft_w, lr=self.soft_lr, steps=self.soft_steps)
        except ValueError as exc:
            raise UsageError(str(exc)) from None


_FLAG_NAMES = {
    "scene": "--scene", "cams": "--cams", "out": "--out", "objective": "--objective",
    "target_image": "--target-image", "target_mask": "--target-mask", "box": "--box", "eta": "--eta",
    "alpha": "--alpha", "beta": "--beta", "kp": "--kp", "kl": "--kl", "iters": "--iters",
    "lambda_ssim": "--lambda-ssim", "variant": "--variant", "kind": "--kind", "soft_w": "--soft-w",
    "axis": "--axis", "values": "--values", "seed": "--seed", "surrogate_seed": "--surrogate-seed",
    "threads": "--threads", "n": "--n", "spread": "--spread", "n_cams": "--n-cams", "radius": "--radius",
    "height": "--height", "image_size": "--image-size", "fov": "--fov", "background": "--background",
    "holdout_every": "--holdout-every", "lambda_dice": "--lambda-dice", "soft_lr": "--soft-lr",
    "soft_steps": "--soft-steps", "view_schedule": "--view-schedule",
}
_CHOICES = {
    "objective": ("vu", "vt", "st"),
    "variant": ("adlift", "adlift-star"),
    "kind": ("fit2d", "soft"),
    "axis": SWEEP_AXES,
    "view_schedule": ("round_robin", "random"),
}


def _field_type(f) -> type:
    t = str(f.type)
    if t.startswith("int"):
        return int
    if t.startswith("float"):
        return float
    return str


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adlift", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    required = {
        "gen-scene": ("out",),
        "protect": ("scene", "cams", "out"),
        "baseline": ("scene", "cams", "out"),
        "eval": ("scene", "cams", "out"),
        "sweep": ("scene", "cams", "out"),
        "render": ("scene", "cams", "out"),
    }
    for name, req in required.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (e.g. a previous config.resolved)")
        for f in fields(RunConfig):
            kw = {"dest": f.name, "default": None, "type": _field_type(f)}
            if f.name in _CHOICES:
                kw["choices"] = _CHOICES[f.name]
            p.add_argument(_FLAG_NAMES[f.name], **kw)
        p.set_defaults(_required=req)
    return parser


def resolve_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> RunConfig:
    values = asdict(RunConfig())
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        unknown = set(file_values) - set(values)
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for k in values:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    cfg = RunConfig(**values)
    missing = [_FLAG_NAMES[k] for k in args._required if getattr(cfg, k) is None]
    if missing:
        parser.error(f"missing required arguments: {', '.join(missing)}")
    for k, allowed in _CHOICES.items():
        if getattr(cfg, k) not in allowed:
            parser.error(f"{_FLAG_NAMES[k]} must be one of {allowed}")
    return cfg


# ---------------------------------------------------------------- helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    return out


def _load_inputs(cfg: RunConfig) -> tuple[Scene, list]:
    for p in (cfg.scene, cfg.cams):
        if not Path(p).is_file():
            raise UsageError(f"no such file: {p}")
    try:
        return load_scene(cfg.scene), load_cameras(cfg.cams)
    except SceneFormatError as exc:
        raise UsageError(str(exc)) from None


def _split(cfg: RunConfig, cams: list) -> tuple[list, list]:
    if cfg.holdout_every and cfg.holdout_every > 1 and len(cams) >= cfg.holdout_every:
        return split_train_novel(cams, cfg.holdout_every)
    return list(cams), []


def _read_image(path: str) -> np.ndarray:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    try:
        return read_ppm(path) if path.lower().endswith(".ppm") else read_lgim(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_objective(cfg: RunConfig, cams: list) -> AttackObjective:
    h, w = cams[0].height, cams[0].width
    if cfg.objective == "vu":
        return AttackObjective.vu()
    if cfg.objective == "vt":
        if not cfg.target_image:
            raise UsageError("--objective vt needs --target-image")
        img = _read_image(cfg.target_image)
        if img.shape != (h, w, 3):
            raise UsageError(f"target image is {img.shape}, views are {(h, w, 3)}")
        return AttackObjective.vt(img)
    lh, lw = latent_shape(h, w)
    if cfg.box:
        try:
            box = tuple(int(v) for v in cfg.box.split(","))
            assert len(box) == 4
        except (ValueError, AssertionError):
            raise UsageError("--box must be x,y,w,h") from None
    else:
        box = (lw // 4, lh // 4, max(1, lw // 2), max(1, lh // 2))
    if cfg.target_mask:
        mask = _read_image(cfg.target_mask)[:, :, 0]
    else:
        mask = np.zeros((lh, lw))
    try:
        return AttackObjective.st(mask, box, cfg.lambda_dice)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_finite(scene: Scene) -> None:
    if not np.all(np.isfinite(scene.safeguard.to_records())):
        raise FloatingPointError("non-finite safeguard parameters")


# ---------------------------------------------------------------- commands


def cmd_gen_scene(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    try:
        scene = make_synthetic_scene(cfg.n, cfg.seed, cfg.spread, background=(cfg.background,) * 3)
        cams = make_camera_ring(cfg.n_cams, cfg.radius, cfg.height, cfg.image_size, cfg.fov)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_scene(scene, out / "scene.json")
    save_cameras(cams, out / "cameras.json")
    return 0


def cmd_protect(cfg: RunConfig) -> int:
    scene, cams = _load_inputs(cfg)
    lcfg = cfg.lpgd()
    out = _out_dir(cfg)
    train, novel = _split(cfg, cams)
    models = Surrogates.from_seed(cfg.surrogate_seed)
    objective = build_objective(cfg, cams)
    start = initial_safeguard(scene.raw_only(), train, objective, models, lcfg)
    prot, log = protect(start, train, objective, models, lcfg)
    _check_finite(prot)
    save_scene(prot, out / "protected.json")
    log.save(out / "trainlog.jsonl")
    echo = {"method": cfg.variant, **lcfg.to_dict(), "objective": objective.describe()}
    evaluate(scene, prot, train, novel, objective, models, echo).save(out / "report.json")
    return 0


def cmd_baseline(cfg: RunConfig) -> int:
    scene, cams = _load_inputs(cfg)
    lcfg = cfg.lpgd()
    out = _out_dir(cfg)
    train, novel = _split(cfg, cams)
    models = Surrogates.from_seed(cfg.surrogate_seed)
    objective = build_objective(cfg, cams)
    if cfg.kind == "fit2d":
        prot, res = fit2d(scene, train, objective, models, lcfg)
        res.log.save(out / "trainlog.jsonl")
        echo = {"method": "fit2d", **lcfg.to_dict()}
    else:
        scfg = cfg.soft()
        prot, tlog = soft_constraint_protect(scene.raw_only(), train, objective, models, scfg)
        tlog.save(out / "tradeoff.jsonl")
        echo = {"method": "soft", **scfg.to_dict()}
    _check_finite(prot)
    echo["objective"] = objective.describe()
    save_scene(prot, out / "protected.json")
    evaluate(scene, prot, train, novel, objective, models, echo).save(out / "report.json")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    scene, cams = _load_inputs(cfg)
    out = _out_dir(cfg)
    train, novel = _split(cfg, cams)
    models = Surrogates.from_seed(cfg.surrogate_seed)
    objective = build_objective(cfg, cams)
    evaluate(scene, scene, train, novel, objective, models, {"objective": objective.describe()}).save(
        out / "report.json")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    scene, cams = _load_inputs(cfg)
    lcfg = cfg.lpgd()
    try:
        values = [float(v) for v in cfg.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError("--values must be a comma-separated list of numbers") from None
    if not values:
        raise UsageError("--values is empty")
    out = _out_dir(cfg)
    train, novel = _split(cfg, cams)
    models = Surrogates.from_seed(cfg.surrogate_seed)
    objective = build_objective(cfg, cams)
    try:
        table = sweep(scene, train, objective, models, cfg.axis, values, lcfg, cfg.soft(), novel_cams=novel)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    (out / "sweep.json").write_text(table.to_json())
    (out / "scatter.csv").write_text(table.to_csv())
    return 0


def cmd_render(cfg: RunConfig) -> int:
    scene, cams = _load_inputs(cfg)
    out = _out_dir(cfg)
    for i, cam in enumerate(cams):
        img = render_mod.render(scene, cam)
        write_ppm(out / f"view_{i:03d}.ppm", img)
        write_lgim(out / f"view_{i:03d}.lgim", img)
    return 0


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "protect": cmd_protect,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = resolve_config(args, parser)
    if cfg.threads:
        render_mod.set_threads(cfg.threads)
    try:
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"adlift {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, OverflowError) as exc:
        print(f"adlift {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
