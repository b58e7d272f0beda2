import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, text = marker.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _CRITERIA.append((number, status, text, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, text, duration in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {text}  ({duration:.1f} s)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from avtse.mixture_sim import synth_corpus

    root = tmp_path_factory.mktemp("corpus")
    synth_corpus(root, n_speakers=6, utts_per_speaker=2, seed=3, visual_channels=16)
    return root
