"""Shared domain types, episode validation, clip sampling and splits."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

FPS = 30
GRID = 21
NUM_JOINTS = 42
RAW_CHANNELS = 256
SCENARIOS = ("Home", "Workbench", "Office", "Retail", "Outdoor")
TRACKER_ROLES = ("chest", "left_wrist", "right_wrist")
# Stored at invalid grid cells; arithmetic must go through the boolean mask instead.
INVALID = np.nan


class EpisodeTooShort(ValueError):
    pass


class SplitError(ValueError):
    pass


class ViewId(enum.IntEnum):
    EGO = 0
    WRIST_LEFT = 1
    WRIST_RIGHT = 2

    @property
    def short(self) -> str:
        return ("ego", "wl", "wr")[self]

    @property
    def stream(self) -> str:
        """Name of the recorded camera stream for this view."""
        return ("chest", "left", "right")[self]

    @classmethod
    def parse(cls, name: str) -> "ViewId":
        key = name.strip().lower()
        for v in cls:
            if key in (v.short, v.stream, v.name.lower()):
                return v
        raise ValueError(f"unknown view {name!r}")


ALL_VIEWS = (ViewId.EGO, ViewId.WRIST_LEFT, ViewId.WRIST_RIGHT)


class HandSide(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class TrackerPose:
    role: str
    trans: tuple[float, float, float]
    rot: tuple[float, float, float, float]  # (w, x, y, z)

    def __post_init__(self):
        if self.role not in TRACKER_ROLES:
            raise ValueError(f"unknown tracker role {self.role!r}")
        n = math.sqrt(sum(q * q for q in self.rot))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"tracker rotation is not a unit quaternion (norm {n})")


@dataclass(frozen=True)
class HandPoseFrame:
    joints: np.ndarray  # (42, 3); rows 0-20 left hand, 21-41 right hand
    valid: tuple[bool, bool]  # (left, right)
    aligned_to_vive: bool = False


@dataclass(frozen=True)
class RawTactileFrame:
    sensor_left: np.ndarray  # (256,) uint8
    sensor_right: np.ndarray
    quat_left: tuple[float, float, float, float]
    quat_right: tuple[float, float, float, float]


@dataclass(frozen=True)
class CanonicalTactileGrid:
    """Bilateral pressure in the left-hand canonical frame.

    ``values`` is (2, 21, 21) holding left then right; cells where ``valid``
    is False hold ``INVALID`` and never enter any loss or metric.
    """

    values: np.ndarray
    valid: np.ndarray

    @property
    def left(self) -> np.ndarray:
        return self.values[0]

    @property
    def right(self) -> np.ndarray:
        return self.values[1]


@dataclass
class FrameRecord:
    """One 30 Hz snapshot.

    Any payload may be None when its sensor had not delivered a reading yet;
    ``images`` maps ViewId to (H, W, 3) uint8 arrays (pixel value / 255).
    """

    frame_index: int
    ts: float
    images: dict[ViewId, np.ndarray | None]
    pose: HandPoseFrame | None
    trackers: dict[str, TrackerPose] | None
    raw_tactile: RawTactileFrame | None
    source_ts: dict[str, float | None] = field(default_factory=dict)
    # capture time of each payload; source_ts is when it became available
    produced_ts: dict[str, float | None] = field(default_factory=dict)


@dataclass
class EpisodeMeta:
    episode_id: str
    task: str
    scenario: str
    object_id: str
    fps: int = FPS
    flags: set[str] = field(default_factory=set)
    views: tuple[ViewId, ...] = ALL_VIEWS

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "task": self.task,
            "scenario": self.scenario,
            "object_id": self.object_id,
            "fps": self.fps,
            "flags": sorted(self.flags),
            "views": [v.short for v in self.views],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpisodeMeta":
        return cls(
            episode_id=d["episode_id"],
            task=d["task"],
            scenario=d["scenario"],
            object_id=d["object_id"],
            fps=int(d.get("fps", FPS)),
            flags=set(d.get("flags", ())),
            views=tuple(ViewId.parse(v) for v in d.get("views", ("ego", "wl", "wr"))),
        )


@dataclass
class Episode:
    meta: EpisodeMeta
    frames: list[FrameRecord]
    # (n, 2, 21, 21) canonical pressure plus (2, 21, 21) validity; None before preprocessing
    pressure: np.ndarray | None = None
    pressure_valid: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def canonical(self, i: int) -> CanonicalTactileGrid:
        return CanonicalTactileGrid(self.pressure[i], self.pressure_valid)

    def image_stack(self, view: ViewId, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.frames)) if indices is None else indices
        return np.stack([self.frames[i].images[view] for i in idx])

    def joint_stack(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.frames)) if indices is None else indices
        out = np.zeros((len(idx), NUM_JOINTS, 3))
        for k, i in enumerate(idx):
            pose = self.frames[i].pose
            if pose is not None:
                out[k] = pose.joints
        return out


@dataclass(frozen=True)
class Clip:
    episode: Episode
    indices: tuple[int, ...]
    stride: int

    @property
    def T(self) -> int:
        return len(self.indices)

    @property
    def frames(self) -> list[FrameRecord]:
        return [self.episode.frames[i] for i in self.indices]


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset[str]
    val: frozenset[str]
    test_seen: frozenset[str]
    test_unseen: frozenset[str]

    def get(self, name: str) -> frozenset[str]:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {k: sorted(self.get(k)) for k in ("train", "val", "test_seen", "test_unseen")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSpec":
        return cls(*(frozenset(d[k]) for k in ("train", "val", "test_seen", "test_unseen")))


def validate_episode(ep: Episode) -> list[str]:
    """Return human-readable invariant violations; an empty list means valid."""
    problems: list[str] = []
    if ep.meta.fps != FPS:
        problems.append(f"meta: fps is {ep.meta.fps}, expected {FPS}")
    if ep.meta.scenario not in SCENARIOS:
        problems.append(f"meta: unknown scenario {ep.meta.scenario!r}")

    expected = 0
    prev_ts = None
    for fr in ep.frames:
        if fr.frame_index != expected:
            missing = ", ".join(str(i) for i in range(expected, fr.frame_index)) or str(expected)
            problems.append(
                f"frame {fr.frame_index}: frame_index not contiguous (missing index {missing})"
            )
        expected = fr.frame_index + 1

        if not math.isfinite(fr.ts) or fr.ts < 0:
            problems.append(f"frame {fr.frame_index}: ts {fr.ts} is not a finite non-negative time")
        elif prev_ts is not None and fr.ts <= prev_ts:
            problems.append(f"frame {fr.frame_index}: ts not strictly increasing ({prev_ts} -> {fr.ts})")
        prev_ts = fr.ts

        for name, sts in fr.source_ts.items():
            if sts is not None and sts > fr.ts + 1e-12:
                problems.append(f"frame {fr.frame_index}: source_ts[{name}] {sts} is after tick {fr.ts}")
        for view in ep.meta.views:
            if view not in fr.images:
                problems.append(f"frame {fr.frame_index}: images missing declared view {view.short}")
        if fr.pose is not None:
            j = np.asarray(fr.pose.joints)
            if j.shape != (NUM_JOINTS, 3):
                problems.append(f"frame {fr.frame_index}: pose joints shape {j.shape}")
            else:
                for h, ok in enumerate(fr.pose.valid):
                    if ok and not np.all(np.isfinite(j[21 * h : 21 * (h + 1)])):
                        problems.append(f"frame {fr.frame_index}: pose has non-finite joints")
        if fr.raw_tactile is not None:
            for side in ("sensor_left", "sensor_right"):
                v = np.asarray(getattr(fr.raw_tactile, side))
                if v.shape != (RAW_CHANNELS,) or v.min() < 0 or v.max() > 255:
                    problems.append(f"frame {fr.frame_index}: {side} not 256 values in [0,255]")

    if ep.pressure is not None:
        if ep.pressure.shape != (len(ep.frames), 2, GRID, GRID):
            problems.append(f"pressure: shape {ep.pressure.shape} does not match {len(ep.frames)} frames")
        elif ep.pressure_valid is not None:
            vals = ep.pressure[:, ep.pressure_valid]
            if vals.size and (np.nanmin(vals) < 0 or np.nanmax(vals) > 1 or np.isnan(vals).any()):
                problems.append("pressure: valid cells outside [0,1]")
    return problems


def clip_span(T: int, stride: int) -> int:
    return (T - 1) * stride + 1


def clip_starts(n_frames: int, T: int, stride: int) -> range:
    span = clip_span(T, stride)
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    if n_frames < span:
        raise EpisodeTooShort(f"episode has {n_frames} frames, a clip needs {span}")
    return range(0, n_frames - span + 1)


def make_clip(ep: Episode, start: int, T: int, stride: int) -> Clip:
    return Clip(ep, tuple(start + k * stride for k in range(T)), stride)


def sample_clips(ep: Episode, T: int, stride: int, seed: int, count: int = 1) -> list[Clip]:
    """Draw ``count`` clips with uniformly random starts, reproducible from ``seed``."""
    starts = clip_starts(len(ep), T, stride)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(starts), size=count)
    return [make_clip(ep, starts[int(p)], T, stride) for p in picks]


def covering_clips(n_frames: int, T: int, stride: int) -> list[tuple[int, ...]]:
    """Clip index tuples that together cover every reachable frame once or more.

    Frames are grouped by ``index % stride``; each group with at least ``T``
    members is tiled back to back, the last clip aligned to the group's end.
    Groups shorter than ``T`` cannot appear in any clip and are left out.
    """
    clip_starts(n_frames, T, stride)
    out = []
    for phase in range(stride):
        members = list(range(phase, n_frames, stride))
        if len(members) < T:
            continue
        pos = 0
        while True:
            pos = min(pos, len(members) - T)
            out.append(tuple(members[pos : pos + T]))
            if pos + T >= len(members):
                break
            pos += T
    return out


def make_splits(
    episodes: Sequence[EpisodeMeta],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    holdout_objects: set[str] | frozenset[str] = frozenset(),
    seed: int = 0,
) -> SplitSpec:
    """Episode-level train/val/test split with an unseen-object test set.

    Every episode whose object is held out goes to ``test_unseen``; the rest
    are shuffled and cut by ``ratios``, with rounding remainders sent to train.
    """
    if not holdout_objects:
        raise SplitError("holdout_objects must be nonempty")
    objects = {m.object_id for m in episodes}
    if objects and objects <= set(holdout_objects):
        raise SplitError("holdout objects cover every object; nothing left to train on")

    unseen = sorted(m.episode_id for m in episodes if m.object_id in holdout_objects)
    rest = sorted(m.episode_id for m in episodes if m.object_id not in holdout_objects)
    rng = np.random.default_rng(seed)
    order = [rest[i] for i in rng.permutation(len(rest))]

    n = len(order)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    return SplitSpec(
        train=frozenset(order[:n_train]),
        val=frozenset(order[n_train : n_train + n_val]),
        test_seen=frozenset(order[n_train + n_val :]),
        test_unseen=frozenset(unseen),
    )
