import numpy as np
import pytest

from meshnet.mesh_io import DatasetRecord
from meshnet.model import ModelConfig
from meshnet.preprocess import fill_to_budget, prepare
from meshnet.shapes import two_class_dataset


def small_config(num_classes: int = 2, **kw) -> ModelConfig:
    """Narrow network that keeps CPU tests fast but has every component."""
    base = dict(
        frc_k1=8, frc_k2=16, fkc_kernels=8, spatial_widths=(16, 16),
        mesh_conv=((16, 27, 32, 32), (32, 32, 48, 48)), fusion_width=64,
        classifier_widths=(32, 16, num_classes),
    )
    base.update(kw)
    return ModelConfig(**base).validate()


def make_records(rng, faces=64, per_class=4):
    out = []
    for mesh, label in two_class_dataset(rng, per_class):
        fs = prepare(mesh, faces)
        out.append(DatasetRecord(fill_to_budget(fs, faces, rng), label, fs.F))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def records():
    return make_records(np.random.default_rng(7))
