import numpy as np
import pytest

from sddtta import pretrain as pt
from sddtta import synthdata as sd


@pytest.fixture(scope="session")
def small_checkpoint():
    """A quickly pretrained 32x32 net shared by the adaptation tests."""
    spec = sd.DomainSpec(
        "src",
        sd.Texture("stripes", {"angle": 25.0, "frequency": 5.0}),
        ("ellipse_blob", "scratch_line"),
        defect_rate=0.5,
        noise_sigma=0.02,
        seed=100,
    )
    data = sd.generate_dataset(spec, 60, 32, 32)
    return pt.pretrain(data, pt.PretrainConfig(epochs=6, lr=0.05, seed=1)).params


@pytest.fixture(scope="session")
def small_stream():
    """A short shifted 32x32 target stream."""
    spec = sd.DomainSpec(
        "tgt",
        sd.Texture("smooth_noise", {"scale": 3.0}),
        ("ellipse_blob", "speckle_cluster"),
        defect_rate=0.3,
        noise_sigma=0.03,
        seed=200,
    )
    return sd.generate_dataset(spec, 30, 32, 32)
