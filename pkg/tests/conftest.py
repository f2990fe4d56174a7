import numpy as np
import pytest
import torch
from hypothesis import settings

from tinydistill.data import generate_phantoms, stratified_split

settings.register_profile("tinydistill", deadline=None, max_examples=40)
settings.load_profile("tinydistill")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    records = generate_phantoms(30, 3, size=(64, 64), seed=11, out_dir=out)
    return out, stratified_split(records, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
