import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from touchbench.core import (
    ALL_VIEWS, EpisodeMeta, EpisodeTooShort, SplitError, TrackerPose, ViewId, clip_span, covering_clips,
    make_splits, sample_clips, validate_episode,
)


def test_view_order_and_parse():
    assert list(ALL_VIEWS) == sorted(ALL_VIEWS)
    assert ViewId.EGO < ViewId.WRIST_LEFT < ViewId.WRIST_RIGHT
    for v in ALL_VIEWS:
        assert ViewId.parse(v.short) is v
        assert ViewId.parse(v.name) is v
    with pytest.raises(ValueError):
        ViewId.parse("top")


def test_tracker_quaternion_norm_enforced():
    TrackerPose("chest", (0, 0, 0), (1.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        TrackerPose("chest", (0, 0, 0), (1.0, 0.1, 0.0, 0.0))


def test_valid_episode_has_no_violations(make_plain):
    assert validate_episode(make_plain(10)) == []


def test_index_gap_reported(make_plain):
    ep = make_plain(3)
    ep.frames[2].frame_index = 3
    problems = validate_episode(ep)
    assert len(problems) == 1 and "2" in problems[0] and "frame_index" in problems[0]


def test_decreasing_ts_reported(make_plain):
    ep = make_plain(10)
    ep.frames[5].ts = ep.frames[4].ts - 0.01
    problems = validate_episode(ep)
    assert len(problems) == 1 and "frame 5" in problems[0] and "ts" in problems[0]


def test_validate_is_pure(make_plain):
    ep = make_plain(6)
    ep.frames[3].ts = 0.0
    before = [dataclasses.astuple(f)[:2] for f in ep.frames]
    assert validate_episode(ep) == validate_episode(ep)
    assert [dataclasses.astuple(f)[:2] for f in ep.frames] == before


def test_clip_span_examples(make_plain):
    clips = sample_clips(make_plain(30), 8, 2, seed=0, count=20)
    assert all(c.indices[-1] - c.indices[0] + 1 == 15 for c in clips)
    only = sample_clips(make_plain(15), 8, 2, seed=3, count=5)
    assert {c.indices[0] for c in only} == {0}
    with pytest.raises(EpisodeTooShort):
        sample_clips(make_plain(14), 8, 2, seed=0)


def test_sampling_deterministic(make_plain):
    ep = make_plain(40)
    a = [c.indices for c in sample_clips(ep, 8, 2, seed=11, count=5)]
    b = [c.indices for c in sample_clips(ep, 8, 2, seed=11, count=5)]
    assert a == b


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 80), T=st.integers(1, 9), stride=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_clip_indices_arithmetic(n, T, stride, seed):
    from tests.conftest import plain_episode
    ep = plain_episode(n)
    if n < clip_span(T, stride):
        with pytest.raises(EpisodeTooShort):
            sample_clips(ep, T, stride, seed)
        return
    for c in sample_clips(ep, T, stride, seed, count=3):
        assert len(c.indices) == T and c.indices[-1] < n
        assert all(b - a == stride for a, b in zip(c.indices, c.indices[1:]))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 80), T=st.integers(1, 9), stride=st.integers(1, 4))
def test_covering_clips_reach_every_reachable_frame(n, T, stride):
    if n < clip_span(T, stride):
        return
    clips = covering_clips(n, T, stride)
    covered = {i for c in clips for i in c}
    reachable = {i for i in range(n) if len(range(i % stride, n, stride)) >= T}
    assert covered == reachable
    assert all(len(c) == T and all(b - a == stride for a, b in zip(c, c[1:])) for c in clips)


def _metas(n_rest, n_hold):
    ms = [EpisodeMeta(f"ep{i:06d}", "pour", "Home", f"obj{i % 7}") for i in range(n_rest)]
    ms += [EpisodeMeta(f"ep{n_rest + i:06d}", "dig", "Outdoor", "trowel") for i in range(n_hold)]
    return ms


def test_split_counts_and_holdout():
    ms = _metas(90, 10)
    spec = make_splits(ms, holdout_objects={"trowel"}, seed=0)
    assert spec.test_unseen == {m.episode_id for m in ms if m.object_id == "trowel"}
    assert (len(spec.train), len(spec.val), len(spec.test_seen)) == (72, 9, 9)
    assert make_splits(ms, holdout_objects={"trowel"}, seed=0) == spec


@settings(max_examples=40, deadline=None)
@given(n_rest=st.integers(1, 120), n_hold=st.integers(0, 20), seed=st.integers(0, 1000))
def test_split_partition_properties(n_rest, n_hold, seed):
    ms = _metas(n_rest, n_hold)
    spec = make_splits(ms, holdout_objects={"trowel"}, seed=seed)
    parts = [spec.train, spec.val, spec.test_seen, spec.test_unseen]
    assert sum(len(p) for p in parts) == len(ms)
    assert len(set().union(*parts)) == len(ms)
    train_objects = {m.object_id for m in ms if m.episode_id in spec.train}
    unseen_objects = {m.object_id for m in ms if m.episode_id in spec.test_unseen}
    assert not train_objects & unseen_objects
    assert len(spec.train) >= len(spec.val) and len(spec.train) >= len(spec.test_seen)


def test_split_errors():
    with pytest.raises(SplitError):
        make_splits(_metas(5, 0), holdout_objects=set())
    with pytest.raises(SplitError):
        make_splits(_metas(0, 5), holdout_objects={"trowel"})


def test_subset_nested_and_seeded():
    from touchbench import corpus
    items = list(range(40))
    quarter, half = corpus.subset(items, 0.25, 3), corpus.subset(items, 0.5, 3)
    assert len(quarter) == 10 and len(half) == 20 and set(quarter) <= set(half)
    assert quarter == sorted(quarter) and corpus.subset(items, 1.0, 3) == items
    assert corpus.subset(items, 0.25, 3) == quarter
    with pytest.raises(ValueError):
        corpus.subset(items, 0.0)
