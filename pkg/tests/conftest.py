import sys
from pathlib import Path

import pytest

from m3slam.prior.scene import make_scene, sparse_scene

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))


@pytest.fixture(scope="session")
def sparse_clean():
    return sparse_scene(seed=0, n_frames=3, noise="clean")


@pytest.fixture(scope="session")
def loop_clean():
    return make_scene("loop", n_frames=40, seed=0, noise="clean")


@pytest.fixture(scope="session")
def loop_f300():
    return make_scene("loop", n_frames=20, seed=0, noise="clean", width=160, height=120, f=300.0)


@pytest.fixture(scope="session")
def dynamic_clean():
    return make_scene("dynamic", n_frames=30, seed=0, noise="clean")
