import warnings

import numpy as np
import pytest
import torch
from PIL import Image

from tvgseg.config import toy_config
from tvgseg.harness import synthetic_suite


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def write_folder_dataset(root, classes=("lung",), n=3, size=24, seed=0):
    """<root>/<class>/images/*.png + masks/*.png with a bright square as foreground."""
    rng = np.random.default_rng(seed)
    for cls in classes:
        (root / cls / "images").mkdir(parents=True)
        (root / cls / "masks").mkdir(parents=True)
        for i in range(n):
            img = (rng.uniform(0, 80, (size, size, 3))).astype(np.uint8)
            mask = np.zeros((size, size), np.uint8)
            y, x = rng.integers(2, size // 2, 2)
            mask[y:y + size // 3, x:x + size // 3] = 255
            img[mask > 0] = 220
            Image.fromarray(img).save(root / cls / "images" / f"im{i:02d}.png")
            Image.fromarray(mask).save(root / cls / "masks" / f"im{i:02d}.png")
    return root


@pytest.fixture
def folder_dataset(tmp_path):
    return write_folder_dataset(tmp_path / "data")


@pytest.fixture(scope="session")
def small_suite():
    eps, concepts = synthetic_suite(episodes_per_class=2)
    return list(eps), concepts


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config(**{"adapt.epochs": 3})


@pytest.fixture(autouse=True)
def _quiet_degenerate():
    from tvgseg.vvea import DegenerateLossWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLossWarning)
        yield
