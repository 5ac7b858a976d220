import numpy as np
import pytest

from stemgen.toyworld import GenConfig, fit_codec, gen_song, render_song


@pytest.fixture(scope="session")
def songs():
    return [gen_song(s) for s in range(40)]


@pytest.fixture(scope="session")
def codec(songs):
    corpus = [x for song in songs[:20] for x in render_song(song)]
    return fit_codec(corpus, Q=4, K=64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def gen_cfg():
    return GenConfig()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
