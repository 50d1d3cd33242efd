import numpy as np
import pytest

from arf.field import VoxelGrid
from arf.pipeline import PRESETS, voxelize
from arf.vgg import random_network, save_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def net():
    return random_network(0)


@pytest.fixture(scope="session")
def weight_file(tmp_path_factory, net):
    path = tmp_path_factory.mktemp("weights") / "vgg16_seed0.vggw"
    save_weights(path, net)
    return path


@pytest.fixture
def random_grid(rng):
    dims = (8, 8, 8)
    return VoxelGrid(rng.uniform(0.0, 4.0, dims), rng.normal(size=dims + (3,)), ((-1, -1, -1), (1, 1, 1)))


@pytest.fixture(scope="session")
def spheres_grid():
    """Two-spheres ground truth with perturbed colors so gradients are non-trivial."""
    grid = voxelize(PRESETS["two-spheres"], (32, 32, 32))
    grid.color_logits += np.random.default_rng(7).normal(scale=0.5, size=grid.color_logits.shape).astype(np.float32)
    return grid



ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
