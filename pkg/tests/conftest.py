import numpy as np
import pytest

from causalshot import data
from causalshot.experiment import preprocess


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pool():
    spec = data.SyntheticSceneSpec()
    return preprocess(data.generate_dataset(spec, {"train": 240, "val": 60, "test": 60}, seed=3))


@pytest.fixture(scope="session")
def tiny_pool():
    spec = data.SyntheticSceneSpec(image_size=16, spacing=3.0, blob_sigma=1.0)
    return preprocess(data.generate_dataset(spec, {"train": 96, "val": 64, "test": 64}, seed=5))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
