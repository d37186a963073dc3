"""Contact metrics and the view-subset evaluation harness.

All metrics aggregate numerators and denominators over every evaluated
(frame, hand, valid cell) before dividing, so streaming over clips gives
the same numbers as one pass over the whole set.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as mdl
from .core import covering_clips

DEFAULT_TAU = 0.1
METRICS = ("temporal_accuracy", "contact_iou", "volumetric_iou", "mae")
LABELS = {"temporal_accuracy": "T.Acc", "contact_iou": "C.IoU", "volumetric_iou": "V.IoU", "mae": "MAE"}
HIGHER_IS_BETTER = {"temporal_accuracy": True, "contact_iou": True, "volumetric_iou": True, "mae": False}


class MissingBaseline(KeyError):
    pass


def _prep(pred, gt, valid=None):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if valid is None:
        valid = np.isfinite(gt)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), gt.shape)
    return pred, gt, valid


def binarize(grid, tau: float = DEFAULT_TAU, valid=None) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    grid = np.asarray(grid, dtype=float)
    valid = np.isfinite(grid) if valid is None else np.broadcast_to(valid, grid.shape)
    with np.errstate(invalid="ignore"):
        return valid & (np.nan_to_num(grid, nan=0.0) > tau)


@dataclass
class MetricAccumulator:
    """Associative sums behind every metric. Inputs are (F, 2, G, G)."""

    tau: float = DEFAULT_TAU
    pooled: bool = False
    units: int = 0
    agree: int = 0
    inter: int = 0
    union: int = 0
    vmin: float = 0.0
    vmax: float = 0.0
    abs_err: float = 0.0
    cells: int = 0
    frames: int = 0

    def update(self, pred, gt, valid=None) -> "MetricAccumulator":
        pred, gt, valid = _prep(pred, gt, valid)
        if pred.ndim != 4:
            raise ValueError(f"expected (frames, hands, G, G), got {pred.shape}")
        p = np.where(valid, pred, 0.0)
        g = np.where(valid, gt, 0.0)
        bp = binarize(p, self.tau, valid)
        bg = binarize(g, self.tau, valid)
        if self.pooled:
            up, ug = bp.any(axis=(1, 2, 3)), bg.any(axis=(1, 2, 3))
        else:
            up, ug = bp.any(axis=(2, 3)), bg.any(axis=(2, 3))
        self.units += up.size
        self.agree += int((up == ug).sum())
        self.inter += int((bp & bg).sum())
        self.union += int((bp | bg).sum())
        self.vmin += float(np.minimum(p, g)[valid].sum())
        self.vmax += float(np.maximum(p, g)[valid].sum())
        self.abs_err += float(np.abs(p - g)[valid].sum())
        self.cells += int(valid.sum())
        self.frames += pred.shape[0]
        return self

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if other.tau != self.tau or other.pooled != self.pooled:
            raise ValueError("cannot merge accumulators with different settings")
        for f in ("units", "agree", "inter", "union", "vmin", "vmax", "abs_err", "cells", "frames"):
            setattr(self, f, getattr(self, f) + getattr(other, f))
        return self

    def temporal_accuracy(self) -> float:
        return self.agree / self.units if self.units else 1.0

    def contact_iou(self) -> float:
        return self.inter / self.union if self.union else 1.0

    def volumetric_iou(self) -> float:
        return self.vmin / self.vmax if self.vmax > 0 else 1.0

    def mae(self) -> float:
        return self.abs_err / self.cells if self.cells else 0.0

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m)() for m in METRICS}


def _as_seq(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x = x[None]
    return x


def temporal_accuracy(pred, gt, tau: float = DEFAULT_TAU, valid=None, pooled: bool = False) -> float:
    pred, gt = _as_seq(pred), _as_seq(gt)
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gt)}")
    return MetricAccumulator(tau, pooled).update(pred, gt, valid).temporal_accuracy()


def contact_iou(pred, gt, tau: float = DEFAULT_TAU, valid=None) -> float:
    return MetricAccumulator(tau).update(_as_seq(pred), _as_seq(gt), valid).contact_iou()


def volumetric_iou(pred, gt, valid=None) -> float:
    return MetricAccumulator().update(_as_seq(pred), _as_seq(gt), valid).volumetric_iou()


def mae(pred, gt, valid=None) -> float:
    return MetricAccumulator().update(_as_seq(pred), _as_seq(gt), valid).mae()


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    temporal_accuracy: float
    contact_iou: float
    volumetric_iou: float
    mae: float
    frames: int
    hands: int
    scenario: str = "all"
    views: str = ""
    tau: float = DEFAULT_TAU
    episodes: int = 0
    per_scenario: dict[str, "MetricsReport"] = field(default_factory=dict)

    @classmethod
    def from_accumulator(cls, acc: MetricAccumulator, scenario="all", views="", episodes=0) -> "MetricsReport":
        hands = acc.units * (2 if acc.pooled else 1)
        return cls(**acc.values(), frames=acc.frames, hands=hands, scenario=scenario, views=views,
                   tau=acc.tau, episodes=episodes)

    def value(self, metric: str) -> float:
        return float(getattr(self, metric))

    def to_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "per_scenario"}
        d["per_scenario"] = {k: r.to_dict() for k, r in sorted(self.per_scenario.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        d = dict(d)
        sub = {k: cls.from_dict(v) for k, v in d.pop("per_scenario", {}).items()}
        return cls(**d, per_scenario=sub)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def relative_change(value: float, baseline: float) -> float:
    """Signed relative change in percent."""
    if baseline == 0:
        return float("inf") if value > 0 else float("-inf") if value < 0 else 0.0
    return 100.0 * (value - baseline) / baseline


def format_change(value: float, baseline: float, digits: int = 1) -> str:
    pct = relative_change(value, baseline)
    text = f"{pct:+.{digits}f}"
    if float(text) == 0.0:
        return f"{0:.{digits}f}%"
    return text + "%"


def _arrow(value: float, baseline: float) -> str:
    return "↑" if value > baseline else "↓" if value < baseline else " "


def report_table(baseline: MetricsReport | None, variants: Sequence[tuple[str, MetricsReport]],
                 baseline_label: str = "ego") -> str:
    """Plain-text table: baseline row, then one row per variant with changes.

    Arrows give the direction of the change; a trailing ``*`` marks cells
    that improve on the baseline (lower is better for MAE).
    """
    if baseline is None:
        raise MissingBaseline("report_table needs a baseline report")
    cols = [LABELS[m] for m in METRICS]
    rows = [["views"] + cols, [baseline_label] + [f"{baseline.value(m):.4f}" for m in METRICS]]
    for label, rep in variants:
        cells = [label]
        for m in METRICS:
            v, b = rep.value(m), baseline.value(m)
            better = (v > b) if HIGHER_IS_BETTER[m] else (v < b)
            cells.append(f"{v:.4f}{_arrow(v, b)}{format_change(v, b)}{'*' if better else ''}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols) + 1)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class EvalConfig:
    tau: float = DEFAULT_TAU
    views: tuple[str, ...] = ("ego", "ego+wl", "ego+wr", "ego+wl+wr")
    max_trajectories: int = 1000
    lightweight: bool = False
    pooled_temporal: bool = False
    batch_size: int = 16

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def select_episodes(feats: Sequence, cfg: EvalConfig) -> list:
    """Lightweight mode keeps the first trajectory of each task; then the cap applies."""
    picked = list(feats)
    if cfg.lightweight:
        seen, keep = set(), []
        for f in picked:
            if f.task not in seen:
                seen.add(f.task)
                keep.append(f)
        picked = keep
    return picked[: cfg.max_trajectories]


def predict_episode(params, feat: "mdl.EpisodeFeatures", views, model_cfg: "mdl.ModelConfig",
                    batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Predictions for every frame reached by covering clips.

    Returns (pred (n, 2, G, G), covered (n,) bool). A frame covered by two
    clips keeps the prediction of the earlier clip.
    """
    n = len(feat)
    clips = covering_clips(n, model_cfg.T, model_cfg.stride)
    pred = np.zeros((n, 2, model_cfg.grid, model_cfg.grid))
    covered = np.zeros(n, dtype=bool)
    vs = mdl.make_viewset(views)
    for lo in range(0, len(clips), batch_size):
        chunk = clips[lo : lo + batch_size]
        tok, vm, jt, _, _ = mdl.gather([feat], [(0, c, vs) for c in chunk])
        out = mdl.forward_tokens(params, tok, vm, jt, model_cfg).data
        for c, o in zip(chunk, out):
            for k, i in enumerate(c):
                if not covered[i]:
                    pred[i] = o[k]
                    covered[i] = True
    return pred, covered


def evaluate(params, feats: Sequence["mdl.EpisodeFeatures"], views, cfg: EvalConfig | None,
             model_cfg: "mdl.ModelConfig", predictor=None) -> MetricsReport:
    """Stream covering-clip predictions into per-scenario accumulators.

    ``predictor(feat) -> (pred, covered)`` overrides the model (used for
    oracle and constant baselines).
    """
    cfg = cfg or EvalConfig()
    episodes = select_episodes(feats, cfg)
    if not episodes:
        raise ValueError("evaluate: no episodes to evaluate")
    vs = mdl.make_viewset(views)
    label = mdl.viewset_label(vs)
    total = MetricAccumulator(cfg.tau, cfg.pooled_temporal)
    per: dict[str, MetricAccumulator] = {}
    counts: dict[str, int] = {}
    for f in episodes:
        if predictor is None:
            pred, covered = predict_episode(params, f, vs, model_cfg, cfg.batch_size)
        else:
            pred, covered = predictor(f)
        acc = MetricAccumulator(cfg.tau, cfg.pooled_temporal).update(pred[covered], f.target[covered], f.valid)
        total.merge(acc)
        per.setdefault(f.scenario, MetricAccumulator(cfg.tau, cfg.pooled_temporal)).merge(acc)
        counts[f.scenario] = counts.get(f.scenario, 0) + 1
    rep = MetricsReport.from_accumulator(total, "all", label, len(episodes))
    rep.per_scenario = {s: MetricsReport.from_accumulator(a, s, label, counts[s]) for s, a in sorted(per.items())}
    return rep
