import numpy as np
import pytest
import torch

from vital.config import RunConfig
from vital.dataset import ToySpec, generate_toy_dataset, split

torch.set_num_threads(1)


TINY = {
    "stage.scales": [4, 8, 16], "stage.K": 3, "stage.z_dim": 4, "stage.g_ch": 4, "stage.d_ch": 4,
    "text.max_len": 8, "text.embed_dim": 6, "text.e_dim": 6, "text.c_dim": 3,
    "text.cnn_channels": 3, "text.t_dim": 5,
    "vision.widths": [4, 4, 6], "vision.d": 6, "fusion.h": 4,
    "data.canvas": 16, "phase1.batch_size": 4, "phase1.iterations": 4, "phase1.log_every": 2,
    "phase2.batch_size": 8, "phase2.epochs": 2, "phase2.K_synth": 3,
}


@pytest.fixture
def tiny_config():
    return RunConfig().replace(**TINY)


@pytest.fixture(scope="session")
def tiny_spec():
    return ToySpec(num_classes=4, shapes=["circle", "cross"], canvas=16, samples_per_class=6, seed=3)


@pytest.fixture(scope="session")
def tiny_records(tiny_spec):
    return generate_toy_dataset(tiny_spec)


@pytest.fixture(scope="session")
def tiny_split(tiny_records):
    return split(tiny_records, 1 / 3, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_gan(tiny_split):
    """(config, train, test, phase1 checkpoint) for a 4-iteration tiny run."""
    from vital.train import train_phase1

    train, test = tiny_split
    cfg = RunConfig().replace(**TINY)
    return cfg, train, test, train_phase1(train, cfg).checkpoint


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, passed, detail)`` once per acceptance criterion."""

    def record(number, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
