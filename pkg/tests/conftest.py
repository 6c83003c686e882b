import os
from pathlib import Path

import numpy as np
import pytest

from corrpose import mesh as M
from corrpose.config import RefinerConfig
from corrpose.refiner import load_svm, save_svm, svm_from_config
from corrpose.synthetic import default_camera

# scene depths of the synthetic benchmark are 1.2-2.0 m
BENCH_REFINER = RefinerConfig(view_distance=1.6)


@pytest.fixture(scope="session")
def sat():
    return M.satellite()


@pytest.fixture(scope="session")
def camera():
    return default_camera()


def cached_svm(mesh, cfg: RefinerConfig, name: str, cache_dir: Path):
    path = cache_dir / f"{name}.npz"
    if path.exists():
        return load_svm(path)
    svm = svm_from_config(mesh, cfg)
    save_svm(svm, path)
    return svm


@pytest.fixture(scope="session")
def svm_cache_dir(tmp_path_factory):
    env = os.environ.get("CORRPOSE_TEST_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("svm")


@pytest.fixture(scope="session")
def sat_svm(sat, svm_cache_dir):
    return cached_svm(sat, BENCH_REFINER, "satellite", svm_cache_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled by test_acceptance
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
