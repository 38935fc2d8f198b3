import numpy as np
import pytest

from vitq.model import ViTConfig
from vitq.toy import make_toy_model, sample_images, class_means, toy_problem

SMALL = ViTConfig(
    image_height=8, image_width=8, channels=3, patch_size=4,
    embed_dim=16, num_layers=2, num_heads=2, mlp_dim=32, num_classes=5,
)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_model():
    return make_toy_model(SMALL, seed=3)


@pytest.fixture(scope="session")
def small_images():
    images, _ = sample_images(class_means(SMALL, 3), 12, seed=5)
    return images


@pytest.fixture(scope="session")
def toy():
    """Default toy problem (seed 0) shared by the slower pipeline tests."""
    return toy_problem(0, n_calib=64, n_eval=128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion lines, printed after the run whether or not -s is given
ACCEPTANCE = []


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        # passed=None records an informational line
        ACCEPTANCE.append((number, title, None if passed is None else bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        tag = {True: "PASS", False: "FAIL", None: "INFO"}[passed]
        terminalreporter.write_line(f"[{tag}] {number}. {title}" + (f": {detail}" if detail else ""))
