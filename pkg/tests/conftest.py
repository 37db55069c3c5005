import numpy as np
import pytest

from spectral_detect.datasets import dataset_dir, load_cifar10, load_mnist


def _have(sub):
    return (dataset_dir() / sub).is_dir()


needs_mnist = pytest.mark.skipif(not _have("mnist"), reason="MNIST not found under DATASET_DIR")
needs_cifar = pytest.mark.skipif(not _have("cifar-10-batches-bin"),
                                 reason="CIFAR-10 not found under DATASET_DIR")


@pytest.fixture(scope="session")
def mnist_train():
    if not _have("mnist"):
        pytest.skip("MNIST not found under DATASET_DIR")
    return load_mnist("train")


@pytest.fixture(scope="session")
def mnist_test():
    if not _have("mnist"):
        pytest.skip("MNIST not found under DATASET_DIR")
    return load_mnist("test")


@pytest.fixture(scope="session")
def cifar_train():
    if not _have("cifar-10-batches-bin"):
        pytest.skip("CIFAR-10 not found under DATASET_DIR")
    return load_cifar10("train")


@pytest.fixture(scope="session")
def cifar_test():
    if not _have("cifar-10-batches-bin"):
        pytest.skip("CIFAR-10 not found under DATASET_DIR")
    return load_cifar10("test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
