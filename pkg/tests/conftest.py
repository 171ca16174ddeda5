import numpy as np
import pytest
import torch

from foggyscene.config import RunConfig
from foggyscene.data import build_synthetic_dataset, load_manifest


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """A small paired dataset at 32x64 shared by train/CLI tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    build_synthetic_dataset(
        root, train_pairs=3, test_pairs=2, resolution=(32, 64), num_classes=5, seed=11
    )
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_root):
    return load_manifest(tiny_root)


def tiny_run_config(**train_overrides) -> RunConfig:
    train = {"batch_size": 1, "threads": 2, "sample_every": 0}
    train.update(train_overrides)
    return RunConfig.from_dict(
        {"model": {"resolution": [32, 64], "num_classes": 5}, "train": train}
    )


@pytest.fixture(scope="session")
def tiny_bundle(tiny_root, tmp_path_factory):
    """A full pipeline checkpoint trained for a handful of iterations."""
    from foggyscene.config import RunConfig
    from foggyscene.pipeline import run_pipeline

    out = tmp_path_factory.mktemp("tiny_bundle")
    cfg = RunConfig.from_dict(
        {
            "data": {"root": str(tiny_root), "train_pairs": 3, "test_pairs": 2},
            "model": {"resolution": [32, 64], "num_classes": 5},
            "train": {
                "iterations_da": 3,
                "iterations_depth": 4,
                "iterations_seg": 4,
                "iterations_finetune": 1,
                "batch_size": 1,
                "threads": 2,
                "sample_every": 0,
                "refined_train": 4,
                "refined_test": 2,
            },
        }
    )
    result = run_pipeline(cfg, out)
    return result


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(1234)
    np.random.seed(1234)
    yield
