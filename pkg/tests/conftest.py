import numpy as np
import pytest

from trimodal.datakit import ClassSpec, TriModalDataset, generate_dataset
from trimodal.gradcheck import tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def _tiny_classes():
    return [
        ClassSpec("hum", {"family": "sine", "base_hz": 300.0, "jitter": 0.05},
                  {"shape": "circle", "color": [230, 40, 40], "size": 0.45, "jitter": 0.1}),
        ClassSpec("hiss", {"family": "white", "base_hz": 700.0, "jitter": 0.05},
                  {"shape": "square", "color": [40, 40, 230], "size": 0.45, "jitter": 0.1}),
        ClassSpec("sweep", {"family": "chirp", "base_hz": 400.0, "jitter": 0.05},
                  {"shape": "triangle", "color": [40, 230, 40], "size": 0.45, "jitter": 0.1}),
    ]


@pytest.fixture(scope="session")
def tiny_classes():
    return _tiny_classes()


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Three classes, four clips each, short tracks; shared by slow-ish tests."""
    out = tmp_path_factory.mktemp("tiny") / "train"
    generate_dataset(_tiny_classes(), 4, 0.25, 7, out, duration_range=(0.25, 0.35))
    return out


@pytest.fixture(scope="session")
def single_label_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("single") / "train"
    generate_dataset(_tiny_classes(), 3, 0.0, 11, out, duration_range=(0.25, 0.35))
    return out


@pytest.fixture
def tiny_dataset(tiny_dataset_dir):
    return TriModalDataset(tiny_dataset_dir)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
