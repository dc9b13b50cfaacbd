"""Train/novel-view evaluation reports and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import SoftConfig, soft_constraint_protect
from .lpgd import LpgdConfig, protect
from .metrics import linf, psnr, ssim
from .render import render
from .scene import Camera, Scene, split_train_novel
from .surrogate import AttackObjective, Surrogates, adv_loss

SWEEP_AXES = ("eta", "alpha", "k_p", "k_l", "soft_w")
CSV_HEADER = ["value", "psnr_db", "ssim", "linf", "adv_train", "adv_novel", "gap"]


@dataclass
class ViewMetrics:
    camera: int
    split: str
    psnr_db: float
    ssim: float
    linf_residual: float
    adv_loss: float


@dataclass
class EvalReport:
    views: list[ViewMetrics]
    psnr_db: float
    psnr_min: float
    ssim: float
    linf_residual: float
    linf_max: float
    adv_train: float
    adv_novel: float | None
    gap: float | None
    config: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def view_values(self, name: str, split: str | None = None) -> list[float]:
        return [getattr(v, name) for v in self.views if split is None or v.split == split]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["views"] = [ViewMetrics(**v) for v in d["views"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        return cls.from_json(Path(path).read_text())


def evaluate(
    raw_scene: Scene,
    prot_scene: Scene,
    train_cams: Sequence[Camera],
    novel_cams: Sequence[Camera],
    objective: AttackObjective,
    models: Surrogates,
    config: dict | None = None,
) -> EvalReport:
    """Invisibility and attack-strength metrics of ``prot_scene`` against the
    raw-only renders of ``raw_scene``, split into train and novel views."""
    if not train_cams:
        raise ValueError("evaluate needs at least one training camera")
    if any(c in train_cams for c in novel_cams):
        raise ValueError("train and novel camera lists overlap")
    t0 = time.perf_counter()
    raw_only = raw_scene.raw_only()
    views = []
    for split, cams in (("train", train_cams), ("novel", novel_cams)):
        for i, cam in enumerate(cams):
            x_raw = render(raw_only, cam)
            x = render(prot_scene, cam)
            views.append(ViewMetrics(
                camera=i, split=split, psnr_db=psnr(x, x_raw), ssim=ssim(x, x_raw),
                linf_residual=linf(x, x_raw), adv_loss=adv_loss(objective, models, x, x_raw)[0],
            ))
    adv_train = float(np.mean([v.adv_loss for v in views if v.split == "train"]))
    novel = [v.adv_loss for v in views if v.split == "novel"]
    adv_novel = float(np.mean(novel)) if novel else None
    lin = [v.linf_residual for v in views]
    return EvalReport(
        views=views,
        psnr_db=float(np.mean([v.psnr_db for v in views])),
        psnr_min=float(min(v.psnr_db for v in views)),
        ssim=float(np.mean([v.ssim for v in views])),
        linf_residual=float(np.median(lin)),
        linf_max=float(max(lin)),
        adv_train=adv_train,
        adv_novel=adv_novel,
        gap=abs(adv_train - adv_novel) if adv_novel is not None else None,
        config=dict(config or {}),
        wall_seconds=time.perf_counter() - t0,
    )


@dataclass
class SweepRow:
    value: float
    config: dict
    report: EvalReport

    def scatter(self) -> tuple[float, float]:
        """(PSNR, adversarial loss) over the training views."""
        return self.report.psnr_db, self.report.adv_train


@dataclass
class SweepTable:
    axis: str
    rows: list[SweepRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            rep = r.report
            w.writerow([repr(r.value), repr(rep.psnr_db), repr(rep.ssim), repr(rep.linf_residual),
                        repr(rep.adv_train), repr(rep.adv_novel), repr(rep.gap)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"axis": self.axis,
             "rows": [{"value": r.value, "config": r.config, "report": r.report.to_dict()} for r in self.rows]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> SweepTable:
        d = json.loads(text)
        return cls(d["axis"], [SweepRow(r["value"], r["config"], EvalReport.from_dict(r["report"])) for r in d["rows"]])


def sweep_config(axis: str, value: float, base: LpgdConfig) -> LpgdConfig:
    if axis == "eta":
        return replace(base, eta=float(value), alpha=float(value) / 4.0)
    if axis == "alpha":
        return replace(base, alpha=float(value))
    if axis == "k_p":
        return replace(base, k_p=int(value))
    if axis == "k_l":
        return replace(base, k_l=int(value))
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(
    scene: Scene,
    cameras: Sequence[Camera],
    objective: AttackObjective,
    models: Surrogates,
    axis: str,
    values: Sequence[float],
    base_cfg: LpgdConfig | None = None,
    soft_cfg: SoftConfig | None = None,
    novel_cams: Sequence[Camera] | None = None,
) -> SweepTable:
    """One protect (or soft-baseline, for ``soft_w``) run plus evaluation per value.

    Without ``novel_cams`` every third camera is held out.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("values must be non-empty")
    base_cfg = base_cfg or LpgdConfig()
    soft_cfg = soft_cfg or SoftConfig()
    if novel_cams is None:
        train, novel = split_train_novel(cameras)
    else:
        train, novel = list(cameras), list(novel_cams)
    start = scene.raw_only()
    rows = []
    for v in values:
        if axis == "soft_w":
            scfg = replace(soft_cfg, weight_w=float(v))
            out, _ = soft_constraint_protect(start, train, objective, models, scfg)
            cfg_echo = {"method": "soft", **scfg.to_dict()}
        else:
            cfg = sweep_config(axis, v, base_cfg)
            out, _ = protect(start, train, objective, models, cfg)
            cfg_echo = {"method": "adlift", **cfg.to_dict()}
        cfg_echo["objective"] = objective.describe()
        rows.append(SweepRow(float(v), cfg_echo, evaluate(scene, out, train, novel, objective, models, cfg_echo)))
    return SweepTable(axis, rows)


__all__ = ["CSV_HEADER", "EvalReport", "SWEEP_AXES", "SweepRow", "SweepTable", "ViewMetrics", "evaluate",
           "sweep", "sweep_config"]
