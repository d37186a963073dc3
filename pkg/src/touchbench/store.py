"""Per-trajectory training containers built from episode dirs + pressure archives."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .capture import read_episode_dir, stream_lengths, CAMERA_SENSORS
from .container import ContainerError, ContainerReader, ContainerWriter
from .core import (
    NUM_JOINTS, TRACKER_ROLES, Episode, EpisodeMeta, FrameRecord, HandPoseFrame,
    TrackerPose, ViewId,
)
from .tactile import HandMappings, PreprocessConfig, PressureArchive, default_mappings, preprocess_episode

ARCHIVE_NAME = "pressure_grids.npz"
REQUIRED_GROUPS = ("metadata", "images", "poses", "hands", "pressure")
IMAGE_KEYS = {ViewId.EGO: "ego", ViewId.WRIST_LEFT: "wrist_left", ViewId.WRIST_RIGHT: "wrist_right"}
QUALITY_FLAGS = ("aligned", "row_count_mismatch", "wrist_duplicate_frames", "sensor_absent")


class StreamError(IOError):
    pass


class SchemaError(ContainerError):
    pass


@dataclass
class ConversionReport:
    converted: int = 0
    skipped: int = 0
    failed: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def inputs(self) -> int:
        return self.converted + self.skipped + self.failed

    def to_dict(self) -> dict:
        return {"converted": self.converted, "skipped": self.skipped, "failed": self.failed,
                "failures": [list(f) for f in self.failures]}


def _tracker_array(fr: FrameRecord) -> np.ndarray:
    out = np.full((3, 7), np.nan)
    if fr.trackers is not None:
        for k, role in enumerate(TRACKER_ROLES):
            p = fr.trackers.get(role)
            if p is not None:
                out[k, :3] = p.trans
                out[k, 3:] = p.rot
    return out


def _wrist_duplicates(ep: Episode, n: int) -> bool:
    for sensor in ("left_cam", "right_cam"):
        prev = None
        for fr in ep.frames[:n]:
            cur = fr.produced_ts.get(sensor)
            if cur is not None and cur == prev:
                return True
            prev = cur
    return False


def convert(episode_dir: str | Path, archive: PressureArchive, out_file: str | Path, level: int | None = 4) -> Path:
    """Write one trajectory container truncated to the shortest stream."""
    episode_dir = Path(episode_dir)
    if archive is None or len(archive) == 0:
        raise ValueError(f"{episode_dir}: empty pressure archive")
    try:
        lengths = stream_lengths(episode_dir)
    except (OSError, ValueError, KeyError) as e:
        raise StreamError(f"{episode_dir}: unreadable image {e}") from e
    ep = read_episode_dir(episode_dir)
    sources = dict(lengths, pressure=len(archive), poses=len(ep.frames))
    n = min(sources.values())
    if n == 0:
        raise ValueError(f"{episode_dir}: no frames common to all streams ({sources})")
    flags = set(ep.meta.flags)
    if len(set(sources.values())) > 1:
        flags.add("aligned")
    if _wrist_duplicates(ep, n):
        flags.add("wrist_duplicate_frames")

    images: dict[ViewId, np.ndarray] = {}
    present = np.zeros((n, 3), dtype=bool)
    for view in ViewId:
        path = episode_dir / f"{view.stream}.npz"
        try:
            with np.load(path) as z:
                images[view] = z["frames"][:n]
                present[:, view] = z["present"][:n]
        except Exception as e:  # noqa: BLE001 - any decode failure is reported per stream
            raise StreamError(f"stream {view.stream}: {e}") from e
    height, width = images[ViewId.EGO].shape[1:3]

    frames = ep.frames[:n]
    joints = np.stack([fr.pose.joints if fr.pose is not None else np.full((NUM_JOINTS, 3), np.nan) for fr in frames])
    valid = np.array([fr.pose.valid if fr.pose is not None else (False, False) for fr in frames], dtype=bool)
    aligned = np.array([bool(fr.pose.aligned_to_vive) if fr.pose is not None else False for fr in frames])

    with ContainerWriter(out_file, level=level) as w:
        w.set_attrs({"format": "touchbench-trajectory", "schema_version": 1})
        w.create_group("metadata", {
            "trajectory_id": ep.meta.episode_id,
            "task": ep.meta.task,
            "scenario": ep.meta.scenario,
            "object_id": ep.meta.object_id,
            "num_frames": n,
            "fps": ep.meta.fps,
            "resolution": [int(height), int(width)],
            "quality_flags": sorted(flags),
        })
        w.write("metadata/ts", np.array([fr.ts for fr in frames]), chunk_rows=None)
        w.write("metadata/frame_index", np.array([fr.frame_index for fr in frames], dtype=np.int64), chunk_rows=None)
        w.create_group("images", {"views": [IMAGE_KEYS[v] for v in ViewId]})
        for view in ViewId:
            w.write(f"images/{IMAGE_KEYS[view]}", images[view])
        w.write("images/present", present)
        w.create_group("poses", {"roles": list(TRACKER_ROLES), "layout": "tx,ty,tz,qw,qx,qy,qz"})
        w.write("poses/trackers", np.stack([_tracker_array(fr) for fr in frames]))
        w.create_group("hands", {"sources": ["glove"], "estimated_joints": None})
        w.write("hands/joints", joints)
        w.write("hands/valid", valid)
        w.write("hands/aligned_to_vive", aligned)
        w.create_group("pressure", {"grid_size": archive.grid_size, "norm_meta": archive.norm_meta})
        w.write("pressure/left", archive.pressure[:n, 0])
        w.write("pressure/right", archive.pressure[:n, 1])
        w.write("pressure/valid_left", archive.valid[0], chunk_rows=None)
        w.write("pressure/valid_right", archive.valid[1], chunk_rows=None)
        w.write("pressure/bending_left", archive.bending[:n, 0])
        w.write("pressure/bending_right", archive.bending[:n, 1])
        w.write("pressure/baseline_applied", np.asarray(archive.baseline_applied, dtype=bool), chunk_rows=None)
    return Path(out_file)


def _check_schema(r: ContainerReader) -> None:
    for g in REQUIRED_GROUPS:
        if not r.has_group(g):
            raise SchemaError(f"{r.path}: missing group '{g}'")
    n = r.group_attrs("metadata").get("num_frames")
    for g in REQUIRED_GROUPS:
        for name in r.datasets(g):
            shape = r.shape(f"{g}/{name}")
            per_frame = not name.startswith("valid_") and name != "baseline_applied"
            if per_frame and (not shape or shape[0] != n):
                raise SchemaError(f"{r.path}: group '{g}' dataset '{name}' has {shape[:1]} frames, expected {n}")


def _episode_meta(r: ContainerReader) -> EpisodeMeta:
    a = r.group_attrs("metadata")
    return EpisodeMeta(a["trajectory_id"], a["task"], a["scenario"], a["object_id"], int(a["fps"]),
                       set(a["quality_flags"]))


def _frame(r_arrays: dict, i: int, ts: float, fidx: int) -> FrameRecord:
    images = {v: (r_arrays[IMAGE_KEYS[v]][i] if r_arrays["present"][i, v] else None) for v in ViewId}
    joints = r_arrays["joints"][i]
    valid = tuple(bool(x) for x in r_arrays["valid"][i])
    pose = HandPoseFrame(joints, valid, bool(r_arrays["aligned_to_vive"][i])) if any(valid) else None
    tr = r_arrays["trackers"][i]
    trackers = None
    if not np.isnan(tr).any():
        trackers = {role: TrackerPose(role, tuple(tr[k, :3]), tuple(tr[k, 3:])) for k, role in enumerate(TRACKER_ROLES)}
    return FrameRecord(fidx, ts, images, pose, trackers, None)


def load(path: str | Path) -> Episode:
    """Read a whole trajectory container back into an :class:`Episode`."""
    with ContainerReader(path) as r:
        _check_schema(r)
        arrays = {IMAGE_KEYS[v]: r.read(f"images/{IMAGE_KEYS[v]}") for v in ViewId}
        arrays["present"] = r.read("images/present")
        arrays["joints"] = r.read("hands/joints")
        arrays["valid"] = r.read("hands/valid")
        arrays["aligned_to_vive"] = r.read("hands/aligned_to_vive")
        arrays["trackers"] = r.read("poses/trackers")
        ts = r.read("metadata/ts")
        fidx = r.read("metadata/frame_index")
        frames = [_frame(arrays, i, float(ts[i]), int(fidx[i])) for i in range(len(ts))]
        pressure = np.stack([r.read("pressure/left"), r.read("pressure/right")], axis=1)
        valid = np.stack([r.read("pressure/valid_left"), r.read("pressure/valid_right")])
        return Episode(_episode_meta(r), frames, pressure, valid)


def load_frame(reader: ContainerReader, k: int) -> dict[str, np.ndarray]:
    """Frame ``k`` of every per-frame dataset, reading only that frame's chunks."""
    out = {}
    for g in REQUIRED_GROUPS:
        for name in reader.datasets(g):
            path = f"{g}/{name}"
            shape = reader.shape(path)
            if name.startswith("valid_") or name == "baseline_applied" or g == "metadata":
                continue
            out[path] = reader.read_rows(path, k)[0]
    return out


def is_valid_container(path: str | Path) -> bool:
    p = Path(path)
    if not p.exists():
        return False
    try:
        with ContainerReader(p) as r:
            _check_schema(r)
        return True
    except (ContainerError, OSError, KeyError, ValueError):
        return False


# ----------------------------------------------------------------------------
# batch conversion


def find_episode_dirs(root: str | Path) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob("jq_pressure.json"))


def _episode_id(d: Path) -> str:
    meta = d / "meta.json"
    if meta.exists():
        return json.loads(meta.read_text())["episode_id"]
    return d.name


def read_bad_list(path: str | Path, reason: str | None = None) -> set[str]:
    """Lines of ``<trajectory_id> [reason...]``; ``#`` starts a comment."""
    ids = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tid, _, why = line.partition(" ")
        if "\t" in tid:
            tid, _, why = line.partition("\t")
        if reason is None or reason in why:
            ids.add(tid.strip())
    return ids


def _convert_one(args) -> tuple[str, str, str]:
    d, out, mappings, pre_cfg, level = args
    tid = _episode_id(Path(d))
    try:
        apath = Path(d) / ARCHIVE_NAME
        if apath.exists():
            archive = PressureArchive.load(apath)
        else:
            archive = preprocess_episode(read_episode_dir(d), mappings, pre_cfg)
        convert(d, archive, out, level)
        return tid, "converted", ""
    except Exception as e:  # noqa: BLE001 - failures are recorded, not fatal
        return tid, "failed", f"{type(e).__name__}: {e}"


def batch_convert(
    root: str | Path,
    out_dir: str | Path | None = None,
    workers: int = 1,
    skip_existing: bool = False,
    bad_list: str | Path | None = None,
    reason: str | None = None,
    mappings: HandMappings | None = None,
    pre_cfg: PreprocessConfig | None = None,
    level: int | None = 4,
) -> ConversionReport:
    """Convert every episode dir under ``root`` to ``<out_dir>/<id>.tbc``.

    With ``bad_list`` only the listed trajectories (optionally those whose
    reason contains ``reason``) are considered, and they are always rebuilt.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"root {root} does not exist")
    out_dir = Path(out_dir) if out_dir is not None else root / "containers"
    out_dir.mkdir(parents=True, exist_ok=True)
    mappings = mappings or default_mappings()
    dirs = find_episode_dirs(root)
    wanted = read_bad_list(bad_list, reason) if bad_list is not None else None

    report = ConversionReport()
    jobs = []
    for d in dirs:
        tid = _episode_id(d)
        if wanted is not None and tid not in wanted:
            continue
        out = out_dir / f"{tid}.tbc"
        if wanted is None and skip_existing and is_valid_container(out):
            report.skipped += 1
            continue
        jobs.append((str(d), str(out), mappings, pre_cfg, level))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_convert_one, jobs))
    else:
        results = [_convert_one(j) for j in jobs]
    for tid, status, why in results:
        if status == "converted":
            report.converted += 1
        else:
            report.failed += 1
            report.failures.append((tid, why))
    return report


def load_corpus(directory: str | Path) -> list[Episode]:
    return [load(p) for p in sorted(Path(directory).glob("*.tbc"))]
