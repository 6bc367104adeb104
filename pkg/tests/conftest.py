import numpy as np
import pytest
import torch

from dialgan.perceptual import gen_fixture_weights, load_feature_net

torch.set_num_threads(1)

SMALL_WIDTHS = (4, 8, 8, 16, 16)


def stripe_stack(phase: int, channels: int = 64, size: int = 128, period: int = 8, seed: int = 0):
    """Layer-1-sized stack of row stripes: each channel repeats its own random profile.

    Every channel has the same period, so translating by whole rows moves the
    texture without changing its statistics over full periods.
    """
    profile = np.random.default_rng(seed).uniform(0.0, 1.0, (channels, period))
    rows = (np.arange(size) + phase) % period
    return torch.from_numpy(np.repeat(profile[:, rows][:, :, None], size, axis=2))


@pytest.fixture(scope="session")
def small_weights():
    return gen_fixture_weights(7, SMALL_WIDTHS)


@pytest.fixture(scope="session")
def small_net(small_weights):
    return load_feature_net(small_weights)


@pytest.fixture(scope="session")
def fixture_weights_file(tmp_path_factory):
    from dialgan import container

    path = tmp_path_factory.mktemp("weights") / "fixture7.dgw"
    container.save(path, gen_fixture_weights(7))
    return path


@pytest.fixture(scope="session")
def full_net(fixture_weights_file):
    return load_feature_net(fixture_weights_file)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
