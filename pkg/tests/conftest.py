import os

import pytest

from adapters.replicas import SerialRunner
from core.walk import Scheme, WalkConfig

_ISOLATED = ("RTREE_WORKERS", "RTREE_ORACLE_NMAX", "RTREE_MAX_EDGES", "RTREE_OUTPUT_DIR", "RTREE_PROGRESS")


@pytest.fixture(autouse=True, scope="session")
def isolated_env(tmp_path_factory):
    """Keep bundles out of the working tree and progress bars out of test output."""
    saved = {key: os.environ.get(key) for key in _ISOLATED}
    for key in _ISOLATED:
        os.environ.pop(key, None)
    os.environ["RTREE_OUTPUT_DIR"] = str(tmp_path_factory.mktemp("outputs"))
    os.environ["RTREE_PROGRESS"] = "0"
    yield
    for key, value in saved.items():
        if value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = value


@pytest.fixture
def serial():
    return SerialRunner()


@pytest.fixture
def linear2_b2():
    return WalkConfig(b=2, scheme=Scheme.linear(2), horizon=6, seed=7)
