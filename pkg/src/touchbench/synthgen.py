"""Synthetic bimanual interaction scripts with an analytic pressure oracle.

A :class:`ScenarioScript` fully determines ground-truth pressure, hand
joints, tracker poses, glove readings and rendered views. With occlusion on,
the egocentric view never depends on force; wrist views show a contact
patch whose brightness is affine in force.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import (
    GRID, NUM_JOINTS, RAW_CHANNELS, SCENARIOS, HandPoseFrame, HandSide,
    RawTactileFrame, TrackerPose, ViewId, CanonicalTactileGrid,
)
from .tactile import HandMappings, MappingError, hand_shape

PHASES = ("Approach", "Contact", "Press", "Release")

TASKS = {
    "Home": ("pour", "wipe", "open_jar"),
    "Workbench": ("screw", "hammer", "clamp"),
    "Office": ("type", "staple", "write"),
    "Retail": ("scan", "bag", "stack"),
    "Outdoor": ("water", "dig", "carry"),
}
OBJECTS = (
    "mug", "bottle", "jar", "sponge", "screwdriver", "hammer",
    "stapler", "pen", "box", "can", "hose", "trowel",
)

GLOVE_RGB = np.array([0.85, 0.55, 0.20])
_BACKGROUND = {
    "Home": (0.55, 0.50, 0.45),
    "Workbench": (0.45, 0.45, 0.50),
    "Office": (0.60, 0.60, 0.62),
    "Retail": (0.50, 0.55, 0.50),
    "Outdoor": (0.40, 0.55, 0.40),
}
_WRIST_BG = (0.18, 0.20, 0.26)

# Contact patterns: (row, col, radius) blobs on the canonical left-hand grid.
PATTERNS = (
    ("pinch", ((8, 16.5, 1.5), (2, 13.5, 1.5))),
    ("tripod", ((8, 16.5, 1.5), (2, 13.5, 1.5), (0, 10.5, 1.5))),
    ("palm", ((15, 9.5, 2.5),)),
    ("power", ((9, 16.5, 1.2), (3, 13.5, 1.2), (1, 10.5, 1.2), (2, 7.5, 1.2), (5, 4.5, 1.2), (12, 9.5, 2.0))),
)
# Top-left pixel of each pattern's patch in the left wrist view (56 px frame);
# the right wrist view uses the horizontal mirror.
_PATCH_ORIGIN = ((2, 16), (16, 16), (2, 30), (16, 30))
_PATCH = 10


class FrameRangeError(IndexError):
    pass


@dataclass
class GenConfig:
    image_size: int = 56
    patch: int = 14
    min_frames: int = 40
    max_frames: int = 64
    scenario_mix: dict[str, float] = field(default_factory=lambda: {s: 1.0 for s in SCENARIOS})
    occlusion: bool = True
    image_noise: float = 0.02
    pose_noise: float = 0.002
    bimanual_prob: float = 0.5
    hold_range: tuple[float, float] = (0.3, 0.7)

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.min_frames < 8 or self.max_frames < self.min_frames:
            raise ValueError("need 8 <= min_frames <= max_frames")
        unknown = set(self.scenario_mix) - set(SCENARIOS)
        if unknown:
            raise ValueError(f"unknown scenarios in mix: {sorted(unknown)}")
        if sum(self.scenario_mix.values()) <= 0:
            raise ValueError("scenario_mix has no positive weight")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenConfig":
        d = dict(d)
        if "hold_range" in d:
            d["hold_range"] = tuple(d["hold_range"])
        return cls(**d)


@dataclass(frozen=True)
class HandTrack:
    phases: tuple[tuple[int, int, str], ...]
    force: np.ndarray  # (duration,) in [0, 1]
    pattern: int  # index into PATTERNS, -1 for an idle hand
    contact_cells: Mapping[tuple[int, int], float]

    @property
    def active(self) -> bool:
        return self.pattern >= 0

    def phase_at(self, t: int) -> str:
        for s, e, name in self.phases:
            if s <= t < e:
                return name
        raise FrameRangeError(t)


@dataclass(frozen=True)
class ScenarioScript:
    seed: int
    duration_frames: int
    scenario: str
    task: str
    object_id: str
    object_position: tuple[float, float, float]
    object_radius: float
    object_color: tuple[float, float, float]
    hands: tuple[HandTrack, HandTrack]  # left, right
    occlusion: bool = True

    @property
    def episode_id(self) -> str:
        return f"ep{self.seed:06d}"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "duration_frames": self.duration_frames,
            "scenario": self.scenario,
            "task": self.task,
            "object_id": self.object_id,
            "object_position": list(self.object_position),
            "object_radius": self.object_radius,
            "object_color": list(self.object_color),
            "occlusion": self.occlusion,
            "hands": [
                {
                    "phases": [list(p) for p in h.phases],
                    "force": h.force.tolist(),
                    "pattern": h.pattern,
                    "contact_cells": [[r, c, g] for (r, c), g in sorted(h.contact_cells.items())],
                }
                for h in self.hands
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioScript":
        hands = tuple(
            HandTrack(
                phases=tuple((int(s), int(e), str(n)) for s, e, n in h["phases"]),
                force=np.asarray(h["force"], dtype=np.float64),
                pattern=int(h["pattern"]),
                contact_cells={(int(r), int(c)): float(g) for r, c, g in h["contact_cells"]},
            )
            for h in d["hands"]
        )
        return cls(
            seed=int(d["seed"]),
            duration_frames=int(d["duration_frames"]),
            scenario=d["scenario"],
            task=d["task"],
            object_id=d["object_id"],
            object_position=tuple(d["object_position"]),
            object_radius=float(d["object_radius"]),
            object_color=tuple(d["object_color"]),
            hands=hands,
            occlusion=bool(d.get("occlusion", True)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def pattern_gains(pattern: int) -> dict[tuple[int, int], float]:
    """Per-cell gain in (0, 1] for a contact pattern; the peak cell has gain 1."""
    tac, _ = hand_shape()
    _, blobs = PATTERNS[pattern]
    gains: dict[tuple[int, int], float] = {}
    for r0, c0, rad in blobs:
        for r in range(GRID):
            for c in range(GRID):
                if not tac[r, c]:
                    continue
                d2 = (r - r0) ** 2 + (c - c0) ** 2
                if d2 <= (rad + 0.5) ** 2:
                    g = math.exp(-d2 / (2 * rad**2))
                    gains[(r, c)] = max(gains.get((r, c), 0.0), g)
    peak = max(gains.values())
    return {k: round(v / peak, 6) for k, v in gains.items() if v / peak >= 0.1}


def _force_profile(duration: int, phases, hold: float) -> np.ndarray:
    f = np.zeros(duration)
    for s, e, name in phases:
        n = e - s
        if name == "Contact":
            f[s:e] = hold * np.arange(1, n + 1) / n
        elif name == "Press":
            rise = max(1, n // 3)
            fall = max(1, n // 3)
            top = n - rise - fall
            seg = np.concatenate([
                hold + (1.0 - hold) * np.arange(1, rise + 1) / rise,
                np.ones(max(top, 1)),
                np.arange(fall, 0, -1) / (fall + 1),
            ])[:n]
            f[s:e] = seg
    return np.clip(f, 0.0, 1.0)


def _hand_track(rng: np.random.Generator, duration: int, active: bool, cfg: GenConfig) -> HandTrack:
    if not active:
        return HandTrack(((0, duration, "Approach"),), np.zeros(duration), -1, {})
    fr = rng.uniform([0.15, 0.10, 0.35], [0.30, 0.20, 0.45])
    a = max(1, int(round(fr[0] * duration)))
    b = a + max(2, int(round(fr[1] * duration)))
    c = b + max(4, int(round(fr[2] * duration)))
    c = min(c, duration - 1)
    phases = ((0, a, "Approach"), (a, b, "Contact"), (b, c, "Press"), (c, duration, "Release"))
    hold = float(rng.uniform(*cfg.hold_range))
    pattern = int(rng.integers(len(PATTERNS)))
    return HandTrack(phases, _force_profile(duration, phases, hold), pattern, pattern_gains(pattern))


def object_properties(object_id: str) -> tuple[float, tuple[float, float, float]]:
    k = OBJECTS.index(object_id) if object_id in OBJECTS else sum(map(ord, object_id))
    rng = np.random.default_rng([1234, k])
    radius = float(rng.uniform(0.035, 0.06))
    color = tuple(float(x) for x in rng.uniform(0.1, 0.9, size=3))
    return radius, color


def generate_script(seed: int, cfg: GenConfig | None = None) -> ScenarioScript:
    cfg = cfg or GenConfig()
    rng = np.random.default_rng([20250, seed])
    duration = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    names = [s for s in SCENARIOS if cfg.scenario_mix.get(s, 0.0) > 0]
    w = np.array([cfg.scenario_mix[s] for s in names], dtype=float)
    scenario = names[int(rng.choice(len(names), p=w / w.sum()))]
    task = TASKS[scenario][int(rng.integers(3))]
    object_id = OBJECTS[int(rng.integers(len(OBJECTS)))]
    radius, color = object_properties(object_id)
    pos = (float(rng.uniform(-0.04, 0.04)), float(rng.uniform(-0.02, 0.04)), float(rng.uniform(0.35, 0.45)))
    if rng.random() < cfg.bimanual_prob:
        act = (True, True)
    else:
        act = (True, False) if rng.random() < 0.5 else (False, True)
    hands = tuple(_hand_track(rng, duration, a, cfg) for a in act)
    return ScenarioScript(seed, duration, scenario, task, object_id, pos, radius, color, hands, cfg.occlusion)


# ----------------------------------------------------------------------------
# oracle


def _check_t(script: ScenarioScript, t: int) -> None:
    if not 0 <= t < script.duration_frames:
        raise FrameRangeError(f"frame {t} outside [0, {script.duration_frames})")


def oracle_pressure(script: ScenarioScript, t: int) -> CanonicalTactileGrid:
    """Ground truth: force(t) x gain(cell) on contact cells, zero elsewhere."""
    _check_t(script, t)
    tac, _ = hand_shape()
    values = np.where(tac, 0.0, np.nan)
    values = np.stack([values, values.copy()])
    for h, track in enumerate(script.hands):
        f = float(track.force[t])
        for (r, c), g in track.contact_cells.items():
            values[h, r, c] = f * g
    return CanonicalTactileGrid(values, np.stack([tac, tac]))


# ----------------------------------------------------------------------------
# kinematics

# wrist-relative joint template (metres), MANO order: wrist, thumb, index, middle, ring, little
_FINGER_DIRS = np.array([[0.9, -0.4], [0.35, -1.0], [0.0, -1.0], [-0.3, -1.0], [-0.6, -0.9]])
_SEG = np.array([0.03, 0.025, 0.02, 0.018])


def _proximity(track: HandTrack, t: int) -> float:
    """0 = far from the object, 1 = touching. Depends on phase timing only."""
    if not track.active:
        return 0.0
    for s, e, name in track.phases:
        if s <= t < e:
            if name == "Approach":
                return (t - s + 1) / (e - s + 1)
            if name in ("Contact", "Press"):
                return 1.0
            return 1.0 - (t - s + 1) / (e - s + 1)
    raise FrameRangeError(t)


def _wrist_position(script: ScenarioScript, hand: int, t: int) -> np.ndarray:
    px, py, pz = script.object_position
    sign = -1.0 if hand == 0 else 1.0
    prox = _proximity(script.hands[hand], t)
    dist = 0.22 * (1.0 - prox)
    return np.array([px + sign * (script.object_radius + 0.05 + dist), py + 0.06 * (1 - prox), pz])


def _hand_joints(script: ScenarioScript, hand: int, t: int) -> np.ndarray:
    wrist = _wrist_position(script, hand, t)
    prox = _proximity(script.hands[hand], t)
    curl = 0.2 + 0.6 * prox
    sign = -1.0 if hand == 0 else 1.0
    joints = [wrist]
    for d in _FINGER_DIRS:
        base = wrist.copy()
        for k, seg in enumerate(_SEG):
            ang = curl * 0.5 * (k + 1)
            # fingers point toward the object (+x for left hand) and curl downward
            step = np.array([-sign * d[1] * math.cos(ang), d[0] * 0.5 + math.sin(ang) * 0.5, d[0] * 0.3])
            base = base + seg * step / np.linalg.norm(step)
            joints.append(base.copy())
    return np.array(joints)


def _quat_yaw(angle: float) -> tuple[float, float, float, float]:
    return (math.cos(angle / 2), 0.0, math.sin(angle / 2), 0.0)


def hand_pose(script: ScenarioScript, t: int, noise: float = 0.0) -> HandPoseFrame:
    _check_t(script, t)
    j = np.concatenate([_hand_joints(script, 0, t), _hand_joints(script, 1, t)])
    if noise > 0:
        rng = np.random.default_rng([script.seed, t, 77])
        j = j + rng.normal(0.0, noise, size=j.shape)
    return HandPoseFrame(j, (True, True), aligned_to_vive=True)


def tracker_poses(script: ScenarioScript, t: int) -> dict[str, TrackerPose]:
    _check_t(script, t)
    sway = 0.01 * math.sin(2 * math.pi * t / 45.0)
    out = {"chest": TrackerPose("chest", (sway, -0.30, 0.0), _quat_yaw(0.02 * math.sin(t / 20)))}
    for hand, role in ((0, "left_wrist"), (1, "right_wrist")):
        w = _wrist_position(script, hand, t)
        yaw = (0.3 if hand == 0 else -0.3) * _proximity(script.hands[hand], t)
        out[role] = TrackerPose(role, tuple(float(x) for x in w), _quat_yaw(yaw))
    return out


# ----------------------------------------------------------------------------
# sensor truth


def raw_tactile(script: ScenarioScript, t: int, mappings: HandMappings) -> RawTactileFrame:
    """Inverse of the remap: quantised 8-bit channels whose remap reproduces the oracle."""
    grid = oracle_pressure(script, t)
    vectors = []
    for hand, side in ((0, HandSide.LEFT), (1, HandSide.RIGHT)):
        mapping = mappings.for_side(side)
        rows, cols, idx, bend = mapping.arrays(side)
        canon = grid.values[hand]
        tac_cells = {(int(r), int(c)) for r, c, b in zip(rows, cols, bend) if not b}
        missing = [rc for rc in script.hands[hand].contact_cells if rc not in tac_cells]
        if missing:
            raise MappingError(f"{side.value} contact cells without a tactile channel: {missing[:5]}")
        raw = np.zeros(RAW_CHANNELS, dtype=np.int64)
        vals = canon[rows[~bend], cols[~bend]]
        raw[idx[~bend]] = np.rint(np.clip(vals, 0, 1) * 255)
        closure = _proximity(script.hands[hand], t)
        for i in mapping.bending:
            raw[i] = int(round(40 + 120 * closure + 5 * (i % 7)))
        vectors.append(np.clip(raw, 0, 255).astype(np.uint8))
    qs = tracker_poses(script, t)
    return RawTactileFrame(vectors[0], vectors[1], qs["left_wrist"].rot, qs["right_wrist"].rot)


def synthesize_sensor_truth(script: ScenarioScript, t: int, mappings: HandMappings, cfg: GenConfig | None = None):
    cfg = cfg or GenConfig()
    trackers = tracker_poses(script, t)
    return (
        hand_pose(script, t, cfg.pose_noise),
        raw_tactile(script, t, mappings),
        tuple(trackers[r] for r in ("chest", "left_wrist", "right_wrist")),
    )


# ----------------------------------------------------------------------------
# rendering


def _disc(img: np.ndarray, cy: float, cx: float, r: float, color) -> None:
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = color


def _ellipse(img: np.ndarray, cy: float, cx: float, ry: float, rx: float, color) -> None:
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    img[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = color


def patch_brightness(force: float) -> float:
    return 0.15 + 0.8 * force


def patch_box(view: ViewId, pattern: int, size: int = 56) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) of the contact patch in a wrist view."""
    s = size / 56.0
    y0, x0 = _PATCH_ORIGIN[pattern]
    y0, x0, p = int(round(y0 * s)), int(round(x0 * s)), max(2, int(round(_PATCH * s)))
    if view is ViewId.WRIST_RIGHT:
        x0 = size - x0 - p
    return y0, y0 + p, x0, x0 + p


def _render_ego(script: ScenarioScript, t: int, size: int) -> np.ndarray:
    img = np.empty((size, size, 3))
    img[:] = _BACKGROUND[script.scenario]
    img[int(size * 0.7):] = np.array(_BACKGROUND[script.scenario]) * 0.7
    scale = size / 56.0 * 150.0
    ox, oy = size / 2, size / 2
    px, py, _ = script.object_position
    ocx, ocy = ox + px * scale, oy + py * scale
    _disc(img, ocy, ocx, script.object_radius * scale, script.object_color)
    for hand in (0, 1):
        j = _hand_joints(script, hand, t)
        palm = j[[0, 5, 9, 13, 17]].mean(axis=0)
        cx, cy = ox + palm[0] * scale, oy + palm[1] * scale
        _ellipse(img, cy, cx, 6 * size / 56, 5 * size / 56, GLOVE_RGB)
        for tip in j[[4, 8, 12, 16, 20]]:
            _disc(img, oy + tip[1] * scale, ox + tip[0] * scale, 1.6 * size / 56, GLOVE_RGB)
        f = float(script.hands[hand].force[t])
        if not script.occlusion and f > 0:
            sign = -1.0 if hand == 0 else 1.0
            x = ocx + sign * script.object_radius * scale
            b = patch_brightness(f)
            img[int(ocy) - 2 : int(ocy) + 2, int(x) - 2 : int(x) + 2] = (b, b, b)
    return img


def _render_wrist(script: ScenarioScript, t: int, view: ViewId, size: int) -> np.ndarray:
    hand = 0 if view is ViewId.WRIST_LEFT else 1
    track = script.hands[hand]
    s = size / 56.0
    img = np.empty((size, size, 3))
    img[:] = _WRIST_BG
    prox = _proximity(track, t)
    if prox > 0:
        _disc(img, 10 * s, size / 2, (6 + 14 * prox) * s, script.object_color)
    _ellipse(img, 50 * s, size / 2, 14 * s, 20 * s, GLOVE_RGB)
    for k in range(5):
        x = (8 + 10 * k) * s
        img[int((30 - 4 * prox) * s) : int(44 * s), int(x) : int(x + 6 * s)] = GLOVE_RGB
    f = float(track.force[t])
    if track.active and f > 0:
        y0, y1, x0, x1 = patch_box(view, track.pattern, size)
        b = patch_brightness(f)
        img[y0:y1, x0:x1] = (b, b, b)
    return img


def render_frame(script: ScenarioScript, t: int, view: ViewId, cfg: GenConfig | None = None) -> np.ndarray:
    """Rasterise one view at frame ``t`` as (H, W, 3) uint8."""
    cfg = cfg or GenConfig()
    _check_t(script, t)
    size = cfg.image_size
    if view is ViewId.EGO:
        img = _render_ego(script, t, size)
    else:
        img = _render_wrist(script, t, view, size)
    if cfg.image_noise > 0:
        rng = np.random.default_rng([script.seed, t, int(view), 99])
        img = img + rng.normal(0.0, cfg.image_noise, size=img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def with_force(script: ScenarioScript, hand: int, force: np.ndarray) -> ScenarioScript:
    """Copy of ``script`` with one hand's force profile replaced (test helper)."""
    hands = list(script.hands)
    hands[hand] = dataclasses.replace(hands[hand], force=np.asarray(force, dtype=float))
    return dataclasses.replace(script, hands=tuple(hands))
