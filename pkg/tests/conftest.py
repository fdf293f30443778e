import numpy as np
import pytest

from prelab.backbone import init_backbone
from prelab.synthetic import SyntheticTaskSpec, generate_synthetic_task


@pytest.fixture(scope="session")
def small_backbone():
    return init_backbone(3, d=8, layers=2, heads=2, class_names=["cat", "dog", "car", "tree"])


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic_task(SyntheticTaskSpec(C=4, d=8, K=4, test_per_class=6, noise_sigma=0.2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
