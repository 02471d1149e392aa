import pytest

from fastcar.data import SynthConfig, generate, split
from fastcar.pipeline import TrainConfig, evaluate, train_fastcar

_acceptance_lines: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _acceptance_lines.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_data():
    return generate(SynthConfig())


@pytest.fixture(scope="session")
def default_splits(default_data):
    return split(default_data, (5, 1, 1), seed=0)


@pytest.fixture(scope="session")
def default_fastcar(default_splits):
    """One full 100-epoch FastCAR run on the default synthetic set."""
    train, val, test = default_splits
    result = train_fastcar(train, val, TrainConfig())
    report = evaluate(result.model, result.spec, test, result.wall_clock_seconds)
    return result, report


@pytest.fixture(scope="session")
def small_data():
    return generate(SynthConfig(n_classes=3, samples_per_class=70, feature_dim=8, seed=3))


@pytest.fixture
def small_cfg():
    return TrainConfig(epochs=3, hidden=(16, 16), batch_size=32)
