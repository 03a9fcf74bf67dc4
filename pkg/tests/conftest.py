import numpy as np
import pytest
import torch

from egosynth.data import ClipRecord, DatasetManifest


def make_record(video_id, clip_index, subject="s1", obj="o1", scene="k1"):
    return ClipRecord(video_id, subject, obj, scene, clip_index, [], [], [], [])


def random_manifest(rng, max_videos=6, max_clips=12):
    """A manifest of file-less clip records with randomized metadata."""
    clips = []
    for v in range(int(rng.integers(1, max_videos + 1))):
        subject = f"s{rng.integers(1, 4)}"
        obj = f"o{rng.integers(1, 4)}"
        scene = f"k{rng.integers(1, 5)}"
        for k in range(int(rng.integers(1, max_clips + 1))):
            clips.append(make_record(f"v{v}", k, subject, obj, scene))
    return DatasetManifest("random", clips)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

# criterion number -> (title, passed so far, detail strings)
_CRITERIA: dict[int, tuple[str, bool, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown" or (report.when == "setup" and report.passed):
        return
    number, title = marker.args
    _, ok, details = _CRITERIA.get(number, (title, True, []))
    details += [str(v) for k, v in item.user_properties if k == "detail" and str(v) not in details]
    _CRITERIA[number] = (title, ok and report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({'; '.join(details)})" if details else line)
