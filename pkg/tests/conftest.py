import numpy as np
import pytest
import torch

from xcotgrid.vocab import default_vocab
from xcotgrid.world import generate_split

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def train_samples():
    return generate_split(11, "train", 200)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_sft_model(train_samples):
    """Briefly cold-started small policy: emits a mix of valid and invalid traces."""
    from xcotgrid.policy import PolicyConfig
    from xcotgrid.sft import SftConfig, train_sft

    cfg = SftConfig(steps=300, batch_size=8, learning_rate=3e-3, warmup_steps=20, log_every=100)
    return train_sft(cfg, train_samples, PolicyConfig(d_model=32, n_layers=1, n_heads=2)).model


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line per acceptance criterion (echoed in the terminal summary)."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(label: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
