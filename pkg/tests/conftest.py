import copy
import os

import numpy as np
import pytest
import torch

from cch.body_model import build_rig, load_rig
from cch.config import RunConfig
from cch.dataset import FashionGrammar, generate_dataset
from cch.fashion_text import Vocabulary

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RIG_FILE = os.path.join(ROOT, "data", "rig.json")
VOCAB_FILE = os.path.join(ROOT, "data", "vocab.txt")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long training / timing acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session", autouse=True)
def single_intra_op_thread():
    # same setting as the CLI: parallelism only from the renderer's own pool
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)


# ---------------- Assets ---------------- #


@pytest.fixture(scope="session")
def rig():
    return load_rig(RIG_FILE)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.from_file(VOCAB_FILE)


TWO_JOINT = {
    "rings": 21,
    "segments": 8,
    "box_margin": 0.03,
    "blend_falloff": 0.6,
    "shape_dim": 2,
    "shape_amplitude": 0.01,
    "pose_amplitude": 0.0,
    "basis_seed": 3,
    "parts": [
        {"name": "upper", "parent": -1, "joint": [0.0, 0.0, 0.0], "a": [0.0, 0.0, 0.0],
         "b": [1.0, 0.0, 0.0], "radius": 0.1},
        {"name": "lower", "parent": 0, "joint": [1.0, 0.0, 0.0], "a": [1.0, 0.0, 0.0],
         "b": [2.0, 0.0, 0.0], "radius": 0.1},
    ],
}


@pytest.fixture
def two_joint_description():
    return copy.deepcopy(TWO_JOINT)


@pytest.fixture(scope="session")
def two_joint_rig():
    return build_rig(TWO_JOINT)


# ---------------- Small runs ---------------- #


def small_config(out_dir: str, **train) -> RunConfig:
    """A run small enough to train a few steps in seconds (16×8 frames)."""
    data = {
        "paths": {"rig": RIG_FILE, "vocab": VOCAB_FILE,
                  "dataset": os.path.join(out_dir, "toy.npz"), "out_dir": out_dir},
        "model": {"samples": 4, "embed_dim": 8, "feature_dim": 8, "hidden_layers": 2,
                  "hidden_units": 16, "disc_widths": [4, 4, 4, 4], "seg_dim": 4},
        "train": {"steps": 2, "batch_size": 1, "height": 16, "width": 8, "patch": 0,
                  "checkpoint_every": 1, "log_every": 1, "eikonal_points": 32, "seed": 5},
        "dataset": {"count": 2, "seed": 11},
    }
    data["train"].update(train)
    return RunConfig.from_dict(data)


@pytest.fixture
def make_config(tmp_path):
    def factory(name: str = "run", **train) -> RunConfig:
        return small_config(str(tmp_path / name), **train)
    return factory


@pytest.fixture
def tiny_config(make_config):
    return make_config()


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_records(rig):
    """Two records at the small-run resolution."""
    camera = small_config("unused").camera.build(16, 8)
    return generate_dataset(2, FashionGrammar(), np.random.default_rng(11), rig=rig,
                            camera=camera)
