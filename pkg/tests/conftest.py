import sys

import numpy as np
import pytest
import torch

from signforge.standard import default_pool, default_standard
from signforge.synth import SignDataset, SynthConfig, generate_scenes, instantiate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def standard():
    return default_standard()


@pytest.fixture(scope="session")
def pool():
    return default_pool()


@pytest.fixture(scope="session")
def tiny_cfg():
    return SynthConfig(scenes_per_type=2, augmented_per_base=3, test_scenes_per_type=1, val_fraction=0.2)


@pytest.fixture(scope="session")
def tiny_scenes(tiny_cfg):
    return generate_scenes(tiny_cfg, 0)


@pytest.fixture(scope="session")
def tiny_dataset(standard, tiny_scenes, tiny_cfg):
    return SignDataset(standard, tiny_scenes, instantiate(standard, tiny_scenes, tiny_cfg, 0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(scenes_per_type=2, augmented_per_base=10, test_scenes_per_type=1, val_fraction=0.1,
                       image_size=32)


@pytest.fixture(scope="session")
def small_dataset(standard, small_cfg):
    scenes = generate_scenes(small_cfg, 0)
    return SignDataset(standard, scenes, instantiate(standard, scenes, small_cfg, 0))


@pytest.fixture(scope="session")
def trained_small(small_dataset):
    """small_conv after a short standard training run on the small dataset's train split."""
    from signforge.model import TrainConfig, build_model, train_standard

    model = build_model("small_conv", 7, 32, seed=0)
    cfg = TrainConfig(phase1_epochs=15, phase1_decay_every=10, batch_size=32)
    return train_standard(model, small_dataset.tensors("train"), cfg).eval()


@pytest.fixture(scope="session")
def desk_cfg():
    return SynthConfig()


@pytest.fixture(scope="session")
def desk_dataset(standard, desk_cfg):
    scenes = generate_scenes(desk_cfg, 0)
    return SignDataset(standard, scenes, instantiate(standard, scenes, desk_cfg, 0))


@pytest.fixture(scope="session")
def desk_models(desk_dataset):
    """(standard-trained, DOA-trained) small_conv pair under the desk training defaults."""
    import copy

    from signforge.model import TrainConfig, build_model, train_doa, train_standard

    cfg = TrainConfig.desk()
    data = desk_dataset.tensors("train")
    base = train_standard(build_model("small_conv", 7, desk_dataset.image_size, seed=0), data, cfg)
    doa = train_doa(copy.deepcopy(base), data, cfg)
    return base, doa


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
