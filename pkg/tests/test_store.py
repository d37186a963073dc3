import numpy as np
import pytest

from touchbench import capture, container, store, synthgen, tactile
from touchbench.core import ViewId, validate_episode


def _make_root(root, mappings, n=4, frames=30, rig=None, with_archive=True):
    cfg = synthgen.GenConfig(min_frames=frames, max_frames=frames)
    dirs = []
    for i in range(n):
        s = synthgen.generate_script(100 + i, cfg)
        ep = capture.capture_episode(s, mappings, rig or capture.ideal_rig(), seed=i, cfg=cfg)
        d = capture.write_episode_dir(ep, root / capture.episode_relpath(ep.meta))
        if with_archive:
            tactile.preprocess_episode(ep, mappings).save(d / store.ARCHIVE_NAME)
        dirs.append(d)
    return dirs


@pytest.fixture(scope="module")
def root(tmp_path_factory, mappings):
    r = tmp_path_factory.mktemp("capture")
    _make_root(r, mappings, n=4)
    return r


def _archive(d):
    return tactile.PressureArchive.load(d / store.ARCHIVE_NAME)


def test_convert_equal_lengths(root, tmp_path):
    d = store.find_episode_dirs(root)[0]
    out = store.convert(d, _archive(d), tmp_path / "a.tbc")
    ep = store.load(out)
    assert len(ep.frames) == 30 and "aligned" not in ep.meta.flags
    assert validate_episode(ep) == []


def test_convert_truncates_to_shortest(tmp_path, mappings):
    d = _make_root(tmp_path / "r", mappings, n=1)[0]
    p = d / "left.npz"
    with np.load(p) as z:
        cut = {k: z[k][:28] for k in z.files}
    with open(p, "wb") as f:
        np.savez(f, **cut)
    ep = store.load(store.convert(d, _archive(d), tmp_path / "a.tbc"))
    assert len(ep.frames) == 28 and "aligned" in ep.meta.flags
    assert ep.pressure.shape[0] == 28


def test_empty_archive_rejected(root, tmp_path):
    d = store.find_episode_dirs(root)[0]
    arc = _archive(d)
    empty = tactile.PressureArchive(arc.pressure[:0], arc.valid, arc.bending[:0], arc.bending_valid,
                                    arc.baseline_applied, arc.norm_meta)
    with pytest.raises(ValueError):
        store.convert(d, empty, tmp_path / "a.tbc")


def test_unreadable_stream_named(root, tmp_path):
    src = store.find_episode_dirs(root)[0]
    import shutil
    d = tmp_path / "ep"
    shutil.copytree(src, d)
    (d / "right.npz").write_bytes(b"garbage")
    with pytest.raises(store.StreamError, match="right"):
        store.convert(d, _archive(d), tmp_path / "a.tbc")


def test_round_trip_fields(root, tmp_path):
    d = store.find_episode_dirs(root)[1]
    src = capture.read_episode_dir(d)
    arc = _archive(d)
    ep = store.load(store.convert(d, arc, tmp_path / "a.tbc"))
    assert ep.meta.episode_id == src.meta.episode_id and ep.meta.task == src.meta.task
    assert np.array_equal(ep.pressure, arc.pressure, equal_nan=True)
    assert np.array_equal(ep.pressure_valid, arc.valid)
    for a, b in zip(src.frames, ep.frames):
        assert a.frame_index == b.frame_index and a.ts == b.ts
        for v in ViewId:
            assert np.array_equal(a.images[v], b.images[v])
        assert np.array_equal(a.pose.joints, b.pose.joints) and a.pose.valid == b.pose.valid
        for role, tp in a.trackers.items():
            assert b.trackers[role].trans == tp.trans and b.trackers[role].rot == tp.rot


def test_missing_group_named(root, tmp_path):
    d = store.find_episode_dirs(root)[0]
    good = store.convert(d, _archive(d), tmp_path / "a.tbc")
    bad = tmp_path / "b.tbc"
    with container.ContainerReader(good) as r, container.ContainerWriter(bad) as w:
        w.set_attrs(r.attrs)
        for g in r.groups():
            if g == "pressure":
                continue
            w.create_group(g, r.group_attrs(g))
            for name in r.datasets(g):
                w.write(f"{g}/{name}", r.read(f"{g}/{name}"))
    with pytest.raises(store.SchemaError, match="pressure"):
        store.load(bad)
    assert not store.is_valid_container(bad)


def test_random_access_reads_only_frame_k(root, tmp_path):
    d = store.find_episode_dirs(root)[0]
    out = store.convert(d, _archive(d), tmp_path / "a.tbc")
    full = store.load(out)
    with container.ContainerReader(out) as r:
        row = store.load_frame(r, 7)
        assert r.reads and all(k == 7 for _, k in r.reads)
        total = sum(length for g in r._dir["groups"].values() for e in g["datasets"].values()
                    for _, length in e["chunks"])
        assert r.bytes_read < total / 10
    assert np.array_equal(row["images/ego"], full.frames[7].images[ViewId.EGO])
    assert np.array_equal(row["pressure/left"], full.pressure[7, 0], equal_nan=True)


def test_convert_byte_deterministic(root, tmp_path):
    d = store.find_episode_dirs(root)[2]
    a = store.convert(d, _archive(d), tmp_path / "a.tbc").read_bytes()
    b = store.convert(d, _archive(d), tmp_path / "b.tbc").read_bytes()
    assert a == b


def test_frame_count_coherence(root, tmp_path):
    store.batch_convert(root, tmp_path / "out")
    for p in sorted((tmp_path / "out").glob("*.tbc")):
        with container.ContainerReader(p) as r:
            n = r.group_attrs("metadata")["num_frames"]
            for g in store.REQUIRED_GROUPS:
                for name in r.datasets(g):
                    if not (name.startswith("valid_") or name == "baseline_applied"):
                        assert r.shape(f"{g}/{name}")[0] == n


def test_skip_existing(tmp_path, mappings):
    r = tmp_path / "r"
    dirs = _make_root(r, mappings, n=10, frames=16, with_archive=False)
    out = tmp_path / "out"
    for d in dirs[:3]:
        store.batch_convert(d, out)
    rep = store.batch_convert(r, out, skip_existing=True)
    assert (rep.converted, rep.skipped, rep.failed) == (7, 3, 0)
    assert rep.inputs == 10


def test_bad_list_only_listed(tmp_path, mappings):
    r = tmp_path / "r"
    dirs = _make_root(r, mappings, n=5, frames=16, with_archive=False)
    out = tmp_path / "out"
    store.batch_convert(r, out)
    before = {p.name: p.stat().st_mtime_ns for p in out.glob("*.tbc")}
    ids = sorted(before)[:2]
    bad = tmp_path / "bad.txt"
    bad.write_text(f"{ids[0][:-4]} duplicated wrist frames\n# note\n{ids[1][:-4]}\tcorrupt glove\n")
    import time
    time.sleep(0.01)
    rep = store.batch_convert(r, out, bad_list=bad)
    assert rep.converted == 2
    after = {p.name: p.stat().st_mtime_ns for p in out.glob("*.tbc")}
    changed = sorted(k for k in after if after[k] != before[k])
    assert changed == ids
    rep = store.batch_convert(r, out, bad_list=bad, reason="glove")
    assert rep.converted == 1


def test_worker_count_independent(tmp_path, mappings):
    r = tmp_path / "r"
    _make_root(r, mappings, n=4, frames=16, with_archive=False)
    a = store.batch_convert(r, tmp_path / "w1", workers=1)
    b = store.batch_convert(r, tmp_path / "w4", workers=4)
    assert a.to_dict() == b.to_dict()
    fa = {p.name: p.read_bytes() for p in (tmp_path / "w1").glob("*.tbc")}
    fb = {p.name: p.read_bytes() for p in (tmp_path / "w4").glob("*.tbc")}
    assert fa == fb and len(fa) == 4


def test_failures_recorded(tmp_path, mappings):
    r = tmp_path / "r"
    dirs = _make_root(r, mappings, n=2, frames=16, with_archive=False)
    (dirs[0] / "chest.npz").write_bytes(b"nope")
    rep = store.batch_convert(r, tmp_path / "out")
    assert (rep.converted, rep.failed) == (1, 1) and rep.failures[0][1]


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        store.batch_convert(tmp_path / "nowhere")
