import numpy as np
import pytest

from clipgs.datagen import generate_dataset, load_dataset, make_volume
from clipgs.trainer import desk_config, train_full


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Small shared dataset: 32^3 shells volume, 48px frames."""
    root = tmp_path_factory.mktemp("micro_ds")
    vol = make_volume("nested-shells", dims=(32, 32, 32))
    generate_dataset(vol, n_train=8, n_test=3, image_size=48, z_range=None,
                     seed=101, out_dir=root, steps=48)
    return load_dataset(root)


@pytest.fixture(scope="session")
def micro_model(micro_dataset):
    """A briefly trained model (cloud + deformation MLP) for eval/CLI tests."""
    cfg = desk_config(init_points=200, iters_stage1=60, iters_stage2=60,
                      seed=5, log_interval=50)
    cloud, aam, log = train_full(micro_dataset, cfg)
    return {"cloud": cloud, "aam": aam, "log": log, "config": cfg,
            "dataset": micro_dataset}
