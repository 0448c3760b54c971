import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent / "src"))

from archgen import ArchConfig, ConvType, build_graph  # noqa: E402
from dataio import split, synth_cracks  # noqa: E402
from training import TrainConfig, train  # noqa: E402


def make_config(conv_type=ConvType.STANDARD, layout="block", depth=2, size=8, base=4, input_c=3):
    """Small off-grid network for kernel-level tests."""
    return ArchConfig(
        depth=depth,
        filter_scale=1,
        conv_type=conv_type,
        separable_layout=layout,
        input_h=size,
        input_w=size,
        input_c=input_c,
        base_filters=base,
        off_grid=True,
    )


TINY_VARIANTS = {
    "standard": dict(conv_type=ConvType.STANDARD),
    "dw-block": dict(conv_type=ConvType.DEPTHWISE_SEPARABLE, layout="block"),
    "dw-per_conv": dict(conv_type=ConvType.DEPTHWISE_SEPARABLE, layout="per_conv"),
}


@pytest.fixture
def tiny_graph():
    return build_graph(make_config())


@pytest.fixture(params=sorted(TINY_VARIANTS))
def tiny_variant(request):
    return build_graph(make_config(**TINY_VARIANTS[request.param]))


@pytest.fixture(scope="session")
def small_samples():
    """Synthetic 16x16 samples, enough for a couple of fast epochs."""
    return synth_cracks(24, size=(16, 16), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_run():
    """3-block x1/16 DWConv2D trained on 200 synthetic 96x96 images with the default
    hyperparameters (lr 1e-4, batch 8, 15 epochs)."""
    config = ArchConfig(depth=3, filter_scale="1/16", conv_type=ConvType.DEPTHWISE_SEPARABLE)
    graph = build_graph(config)
    splits = split(synth_cracks(200, seed=0), seed=0)
    result = train(graph, splits, TrainConfig(seed=0, progress=False))
    return graph, splits, result
