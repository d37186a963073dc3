import numpy as np
import pytest

from touchbench import corpus, synthgen, tactile
from touchbench.core import ALL_VIEWS, Episode, EpisodeMeta, FrameRecord


def plain_episode(n: int = 10, fps: int = 30) -> Episode:
    """Minimal well-formed episode: tiny images, no sensor payloads."""
    img = np.zeros((4, 4, 3), np.uint8)
    frames = [FrameRecord(i, i / fps, {v: img for v in ALL_VIEWS}, None, None, None) for i in range(n)]
    return Episode(EpisodeMeta("ep000001", "pour", "Home", "cup"), frames)


@pytest.fixture
def make_plain():
    return plain_episode


@pytest.fixture(scope="session")
def mappings():
    return tactile.default_mappings()


@pytest.fixture(scope="session")
def short_cfg():
    return synthgen.GenConfig(min_frames=40, max_frames=50)


@pytest.fixture(scope="session")
def small_corpus(short_cfg):
    """A dozen short preprocessed episodes shared by model/train/metrics tests."""
    return corpus.synthetic_corpus(12, seed=5, gen_cfg=short_cfg)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
