import numpy as np
import pytest
import torch

from affordmotion.scene_synth import TaskConfig, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_samples():
    """Ten mixed-action samples on 256-point scenes."""
    return generate_dataset(10, seed=3, task_config=TaskConfig(n_frames=24, frame_rate=10), n_points=256)


@pytest.fixture(scope="session")
def walk_samples():
    return generate_dataset(6, seed=5, task_config=TaskConfig(n_frames=16, frame_rate=10, actions=("walk",)),
                            n_points=128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    if report.failed or report.skipped:
        entry["ok"] = False
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        detail = "; ".join(entry["details"])
        line = f"criterion {number} {'PASS' if entry['ok'] else 'FAIL'}: {entry['title']}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
