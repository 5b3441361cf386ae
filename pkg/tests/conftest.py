import numpy as np
import pytest

from phaserec.model import TrainConfig, train_arrays
from phaserec.preprocess import DEFAULT_WINDOW, FeatureConfig, volume_features
from phaserec.synth import PhantomConfig, generate_dataset

SMALL_FEATURES = FeatureConfig(bins=16, grid=2, resolution=32)


@pytest.fixture(scope="session")
def phantom_scans():
    cfg = PhantomConfig(min_slices=10, max_slices=16, dims=32, seed=3)
    return [ls.scan for ls in generate_dataset(cfg, 10, 4)]


@pytest.fixture(scope="session")
def phantom_model(phantom_scans):
    x = np.concatenate([volume_features(s.volume, None, DEFAULT_WINDOW, SMALL_FEATURES) for s in phantom_scans])
    y = np.concatenate([np.full(len(s), int(s.label)) for s in phantom_scans])
    return train_arrays(x, y, TrainConfig(), SMALL_FEATURES.bins, SMALL_FEATURES.grid).params


ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call with (number, passed, detail)."""

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_RESULTS.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
