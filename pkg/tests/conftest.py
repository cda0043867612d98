import numpy as np
import pytest
import torch

from vesrec.data import SynthConfig, synth_two_domain

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """40 images per domain at 32x32, written to disk once per session."""
    out = tmp_path_factory.mktemp("synth_tiny")
    src, tgt = synth_two_domain(SynthConfig(n_per_domain=40, image_size=32, seed=3), out)
    return out, src, tgt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
