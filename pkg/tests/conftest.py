import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from harness_ssl.audio import Waveform  # noqa: E402
from harness_ssl.corpus import synth_tone_corpus  # noqa: E402
from harness_ssl.encoder import init_params, toy_config  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return toy_config(num_clusters=8, depth=2, emb_d=16, h_attn=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_params(tiny_cfg, seed=0), tiny_cfg


@pytest.fixture(scope="session")
def small_corpus():
    return synth_tone_corpus(n_utts=8, units_per_utt=4, unit_seconds=0.25, seed=0)


def sine(seconds=1.0, freq=440.0, rate=16000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


# acceptance outcomes, one line each in the terminal summary
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
