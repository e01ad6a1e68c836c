import numpy as np
import pytest

from eadmnc import detector as det
from eadmnc.data import Dataset, SyntheticGenerator, split


@pytest.fixture(scope="session")
def synth_gen():
    return SyntheticGenerator(2, 6, 4)


@pytest.fixture(scope="session")
def synth_split(synth_gen):
    ds, _ = synth_gen.sample(3000, 3, 0.05, seed=11)
    return split(ds, 0.7, seed=11)


@pytest.fixture(scope="session")
def fitted(synth_split):
    train, test = synth_split
    model = det.fit(train, det.DetectorConfig(seed=11), det.Thresholds(0.05, 0.5))
    return model, train, test


@pytest.fixture(scope="session")
def test_in_model_units(fitted):
    model, _, test = fitted
    return Dataset(test.schema, model.dataset_x(test), test.levels, test.labels, model.stats, test.index)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
