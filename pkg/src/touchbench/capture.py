"""Simulated acquisition rig: asynchronous sensors, 30 Hz snapshots, episode dirs.

Each sensor produces readings at its own rate; a reading becomes available
after a jittered latency and may be dropped. The snapshot at tick ``k``
(time ``k / rate``) holds, per sensor, the reading with the greatest
``available_ts`` not after the tick. Everything runs as a deterministic
event queue; no threads or wall clock.
"""

from __future__ import annotations

import heapq
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    FPS, NUM_JOINTS, TRACKER_ROLES, Episode, EpisodeMeta, FrameRecord, HandPoseFrame,
    RawTactileFrame, TrackerPose, ViewId,
)
from . import synthgen
from .tactile import HandMappings

CAMERA_SENSORS = {"chest_cam": ViewId.EGO, "left_cam": ViewId.WRIST_LEFT, "right_cam": ViewId.WRIST_RIGHT}
SENSOR_NAMES = ("chest_cam", "left_cam", "right_cam", "rokoko", "vive", "glove")
JSONL_FILES = ("jq_pressure.json", "rokoko_hands.json", "vive_poses.json")
_FILE_SENSOR = {"jq_pressure.json": "glove", "rokoko_hands.json": "rokoko", "vive_poses.json": "vive"}


class EpisodeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSpec:
    name: str
    rate: float
    latency_mean: float = 0.0
    latency_jitter: float = 0.0
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.name not in SENSOR_NAMES:
            raise ValueError(f"unknown sensor {self.name!r}; expected one of {SENSOR_NAMES}")
        if self.rate <= 0:
            raise ValueError(f"{self.name}: rate must be > 0")
        if self.latency_mean < 0 or self.latency_jitter < 0:
            raise ValueError(f"{self.name}: latency must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError(f"{self.name}: dropout_prob must be in [0, 1)")


def default_rig() -> list[SensorSpec]:
    return [
        SensorSpec("chest_cam", 30.0, 0.030, 0.004, 0.0),
        SensorSpec("left_cam", 30.0, 0.030, 0.004, 0.0),
        SensorSpec("right_cam", 30.0, 0.030, 0.004, 0.0),
        SensorSpec("rokoko", 100.0, 0.012, 0.003, 0.01),
        SensorSpec("vive", 90.0, 0.006, 0.002, 0.01),
        SensorSpec("glove", 100.0, 0.008, 0.003, 0.02),
    ]


def ideal_rig() -> list[SensorSpec]:
    """Every sensor at 30 Hz with zero latency: snapshots equal the script frames."""
    return [SensorSpec(n, float(FPS)) for n in SENSOR_NAMES]


def load_rig(path: str | Path) -> list[SensorSpec]:
    with open(path) as f:
        data = json.load(f)
    return [SensorSpec(**d) for d in data.get("sensors", data)]


@dataclass(frozen=True)
class SensorEvent:
    sensor: str
    produced_ts: float
    available_ts: float
    payload: int  # script frame index sampled by this reading


def payload_frame(produced_ts: float, duration_frames: int) -> int:
    return min(int(math.floor(produced_ts * FPS + 1e-9)), duration_frames - 1)


def simulate_streams(duration_frames: int, sensors: Sequence[SensorSpec], seed: int) -> list[SensorEvent]:
    """Readings of every sensor over ``duration_frames / 30`` seconds.

    Accepts a :class:`~touchbench.synthgen.ScenarioScript` in place of the frame count.
    """
    if isinstance(duration_frames, synthgen.ScenarioScript):
        duration_frames = duration_frames.duration_frames
    if not sensors:
        raise ValueError("no sensors")
    duration = duration_frames / FPS
    events: list[SensorEvent] = []
    for k, spec in enumerate(sensors):
        rng = np.random.default_rng([seed, k, 5150])
        n = int(math.ceil(duration * spec.rate - 1e-9))
        lat = spec.latency_mean + spec.latency_jitter * rng.standard_normal(n)
        keep = rng.random(n) >= spec.dropout_prob
        for j in range(n):
            if not keep[j]:
                continue
            produced = j / spec.rate
            available = produced + max(0.0, float(lat[j]))
            events.append(SensorEvent(spec.name, produced, available, payload_frame(produced, duration_frames)))
    events.sort(key=lambda e: (e.available_ts, e.sensor, e.produced_ts))
    return events


@dataclass
class Snapshot:
    frame_index: int
    ts: float
    source: dict[str, SensorEvent | None]

    @property
    def absent(self) -> list[str]:
        return [s for s, e in self.source.items() if e is None]


@dataclass
class SnapshotLog:
    snapshots: list[Snapshot]
    sensors: tuple[str, ...]
    rate: float = float(FPS)

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def flagged(self) -> list[int]:
        return [s.frame_index for s in self.snapshots if s.absent]


def synchronize(events: Iterable[SensorEvent], n_ticks: int, rate: float = float(FPS),
                sensors: Sequence[str] | None = None) -> SnapshotLog:
    """Latest-valid snapshot per tick via a merged event/tick queue."""
    if rate <= 0:
        raise ValueError("rate must be > 0")
    events = list(events)
    names = tuple(sensors) if sensors is not None else tuple(sorted({e.sensor for e in events}))
    queue: list[tuple[float, int, int, object]] = []
    for i, e in enumerate(events):
        queue.append((e.available_ts, 0, i, e))  # readings at time t are visible to a tick at t
    for k in range(n_ticks):
        queue.append((k / rate, 1, k, None))
    heapq.heapify(queue)

    latest: dict[str, SensorEvent | None] = {n: None for n in names}
    snaps: list[Snapshot] = []
    while queue:
        _, kind, k, e = heapq.heappop(queue)
        if kind == 0:
            cur = latest.get(e.sensor)
            if e.sensor in latest and (cur is None or e.available_ts >= cur.available_ts):
                latest[e.sensor] = e
        else:
            snaps.append(Snapshot(k, k / rate, dict(latest)))
    return SnapshotLog(snaps, names, rate)


def materialize(log: SnapshotLog, script: "synthgen.ScenarioScript", mappings: HandMappings,
                cfg: "synthgen.GenConfig | None" = None) -> Episode:
    """Fill snapshot payload references with rendered frames and sensor readings."""
    cfg = cfg or synthgen.GenConfig(image_size=56)
    cache: dict[tuple[str, int], object] = {}

    def get(sensor: str, f: int):
        key = (sensor, f)
        if key not in cache:
            if sensor in CAMERA_SENSORS:
                cache[key] = synthgen.render_frame(script, f, CAMERA_SENSORS[sensor], cfg)
            elif sensor == "rokoko":
                cache[key] = synthgen.hand_pose(script, f, cfg.pose_noise)
            elif sensor == "vive":
                cache[key] = synthgen.tracker_poses(script, f)
            else:
                cache[key] = synthgen.raw_tactile(script, f, mappings)
        return cache[key]

    frames = []
    for snap in log.snapshots:
        src = snap.source

        def payload(sensor):
            e = src.get(sensor)
            return None if e is None else get(sensor, e.payload)

        frames.append(FrameRecord(
            frame_index=snap.frame_index,
            ts=snap.ts,
            images={v: payload(s) for s, v in CAMERA_SENSORS.items()},
            pose=payload("rokoko"),
            trackers=payload("vive"),
            raw_tactile=payload("glove"),
            source_ts={s: (None if e is None else e.available_ts) for s, e in src.items()},
            produced_ts={s: (None if e is None else e.produced_ts) for s, e in src.items()},
        ))
    flags = {"sensor_absent"} if log.flagged else set()
    meta = EpisodeMeta(script.episode_id, script.task, script.scenario, script.object_id, flags=flags)
    return Episode(meta, frames)


def capture_episode(script, mappings: HandMappings, sensors: Sequence[SensorSpec] | None = None,
                    seed: int = 0, cfg=None) -> Episode:
    sensors = list(sensors) if sensors is not None else default_rig()
    events = simulate_streams(script.duration_frames, sensors, seed)
    log = synchronize(events, script.duration_frames, float(FPS), [s.name for s in sensors])
    return materialize(log, script, mappings, cfg)


# ----------------------------------------------------------------------------
# episode directory I/O


def episode_relpath(meta: EpisodeMeta, date: str = "20260101") -> Path:
    """``<category>/<date>/<task>/<episode>`` under the capture root."""
    return Path(meta.scenario) / date / meta.task / meta.episode_id


def _vec(x) -> list | None:
    return None if x is None else [float(v) for v in x]


def _jq_row(fr: FrameRecord) -> dict:
    t = fr.raw_tactile
    return {
        "ts": fr.ts,
        "frame_index": fr.frame_index,
        "sensor_left": None if t is None else [int(v) for v in t.sensor_left],
        "sensor_right": None if t is None else [int(v) for v in t.sensor_right],
        "quat_left": None if t is None else _vec(t.quat_left),
        "quat_right": None if t is None else _vec(t.quat_right),
        "source_ts": fr.source_ts.get("glove"),
        "produced_ts": fr.produced_ts.get("glove"),
    }


def _rokoko_row(fr: FrameRecord) -> dict:
    p = fr.pose
    left = right = None
    if p is not None:
        j = np.asarray(p.joints)
        left = j[:21].tolist() if p.valid[0] else None
        right = j[21:].tolist() if p.valid[1] else None
    return {
        "ts": fr.ts,
        "frame_index": fr.frame_index,
        "left_pos": left,
        "right_pos": right,
        "aligned_to_vive": None if p is None else bool(p.aligned_to_vive),
        "source_ts": fr.source_ts.get("rokoko"),
        "produced_ts": fr.produced_ts.get("rokoko"),
    }


def _vive_row(fr: FrameRecord) -> dict:
    trackers = None
    if fr.trackers is not None:
        trackers = {r: {"trans": _vec(p.trans), "rot": _vec(p.rot)} for r, p in fr.trackers.items()}
    return {
        "ts": fr.ts,
        "frame_index": fr.frame_index,
        "trackers": trackers,
        "source_ts": fr.source_ts.get("vive"),
        "produced_ts": fr.produced_ts.get("vive"),
    }


def write_episode_dir(ep: Episode, directory: str | Path, camera_matrix: str | Path | None = None) -> Path:
    """Write the six-stream episode layout (three image containers, three JSON-Lines files)."""
    if not ep.frames:
        raise ValueError("cannot write an empty episode")
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        for fname, rowfn in zip(JSONL_FILES, (_jq_row, _rokoko_row, _vive_row)):
            with open(d / fname, "w") as f:
                for fr in ep.frames:
                    f.write(json.dumps(rowfn(fr)) + "\n")
        for sensor, view in CAMERA_SENSORS.items():
            imgs = [fr.images.get(view) for fr in ep.frames]
            shape = next((im.shape for im in imgs if im is not None), (1, 1, 3))
            present = np.array([im is not None for im in imgs])
            stack = np.stack([im if im is not None else np.zeros(shape, np.uint8) for im in imgs])
            src = np.array([np.nan if fr.source_ts.get(sensor) is None else fr.source_ts[sensor] for fr in ep.frames])
            prod = np.array([np.nan if fr.produced_ts.get(sensor) is None else fr.produced_ts[sensor] for fr in ep.frames])
            with open(d / f"{view.stream}.npz", "wb") as f:
                np.savez(f, frames=stack, present=present, source_ts=src, produced_ts=prod)
        (d / "meta.json").write_text(json.dumps(ep.meta.to_dict(), indent=1))
        if camera_matrix is not None:
            shutil.copyfile(camera_matrix, d / "camera_matrix.txt")
    except OSError as e:
        raise OSError(f"writing episode to {d}: {e}") from e
    return d


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"missing episode file {path}")
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise EpisodeFormatError(f"{path}:{lineno}: malformed JSON line ({e.msg})") from None
    return rows


def stream_lengths(directory: str | Path) -> dict[str, int]:
    d = Path(directory)
    out = {}
    for view in ViewId:
        p = d / f"{view.stream}.npz"
        if not p.exists():
            raise FileNotFoundError(f"missing image stream {p}")
        try:
            with np.load(p) as z:
                out[view.stream] = int(z["present"].shape[0])
        except (OSError, ValueError, KeyError) as e:
            raise EpisodeFormatError(f"stream {view.stream}: {e}") from e
    return out


def _parse_frame(i: int, jq: dict, rk: dict, vv: dict, streams: Mapping[ViewId, Mapping[str, np.ndarray]]) -> FrameRecord:
    ts = float(jq["ts"])
    source_ts = {"glove": jq.get("source_ts"), "rokoko": rk.get("source_ts"), "vive": vv.get("source_ts")}
    produced_ts = {"glove": jq.get("produced_ts"), "rokoko": rk.get("produced_ts"), "vive": vv.get("produced_ts")}
    images = {}
    for sensor, view in CAMERA_SENSORS.items():
        z = streams[view]
        if i < len(z["present"]) and z["present"][i]:
            images[view] = z["frames"][i]
            source_ts[sensor] = float(z["source_ts"][i])
            produced_ts[sensor] = float(z["produced_ts"][i])
        else:
            images[view] = None
            source_ts[sensor] = None
            produced_ts[sensor] = None

    raw = None
    if jq.get("sensor_left") is not None:
        raw = RawTactileFrame(
            np.asarray(jq["sensor_left"], dtype=np.uint8), np.asarray(jq["sensor_right"], dtype=np.uint8),
            tuple(jq["quat_left"]), tuple(jq["quat_right"]),
        )
    pose = None
    if rk.get("source_ts") is not None or rk.get("left_pos") is not None or rk.get("right_pos") is not None:
        j = np.zeros((NUM_JOINTS, 3))
        valid = [rk.get("left_pos") is not None, rk.get("right_pos") is not None]
        if valid[0]:
            j[:21] = rk["left_pos"]
        if valid[1]:
            j[21:] = rk["right_pos"]
        pose = HandPoseFrame(j, tuple(valid), bool(rk.get("aligned_to_vive")))
    trackers = None
    if vv.get("trackers") is not None:
        trackers = {r: TrackerPose(r, tuple(p["trans"]), tuple(p["rot"])) for r, p in vv["trackers"].items()}
    return FrameRecord(int(jq["frame_index"]), ts, images, pose, trackers, raw, source_ts, produced_ts)


def read_episode_dir(directory: str | Path) -> Episode:
    """Reassemble an episode; JSON-Lines row counts are truncated to their minimum."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"episode directory {d} does not exist")
    tables = [_read_jsonl(d / f) for f in JSONL_FILES]
    for rows, fname in zip(tables, JSONL_FILES):
        for lineno, row in enumerate(rows, 1):
            if "ts" not in row or "frame_index" not in row:
                raise EpisodeFormatError(f"{d / fname}:{lineno}: row lacks ts/frame_index")
    n = min(len(t) for t in tables)
    meta_path = d / "meta.json"
    if meta_path.exists():
        meta = EpisodeMeta.from_dict(json.loads(meta_path.read_text()))
    else:
        meta = EpisodeMeta(d.name, d.parent.name, d.parent.parent.parent.name, "unknown")
    if len({len(t) for t in tables}) > 1:
        meta.flags.add("row_count_mismatch")

    streams = {}
    for view in ViewId:
        p = d / f"{view.stream}.npz"
        if not p.exists():
            raise FileNotFoundError(f"missing image stream {p}")
        try:
            with np.load(p) as z:
                streams[view] = {k: z[k] for k in ("frames", "present", "source_ts", "produced_ts")}
        except (OSError, ValueError, KeyError) as e:
            raise EpisodeFormatError(f"stream {view.stream}: {e}") from e

    by_index = [{r["frame_index"]: r for r in t} for t in tables]
    frames = []
    for i in range(n):
        try:
            rows = [t[i] for t in by_index]
        except KeyError:
            raise EpisodeFormatError(f"{d}: frame_index {i} missing from a JSON-Lines file") from None
        frames.append(_parse_frame(i, *rows, streams))
    return Episode(meta, frames)
