import numpy as np
import pytest

from synthetic_scenes import generate
from toy_detector import ConvLayer, ConvSpec, DetectorModel, default_architecture


def make_linear_model(weights, bias=None, input_size=(1, 1), visual_threshold=0.3) -> DetectorModel:
    """
    Detector without trunk: one 1x1 heatmap head, so the logits at every
    cell are ``weights @ x[r, c] + bias``. Weights are rounded to float32
    like any stored model.
    """
    weights = np.asarray(weights, dtype=np.float32)
    k, d = weights.shape
    bias = np.zeros(k, np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
    heatmap = ConvLayer(ConvSpec(d, k, kernel=1, stride=1, padding=0, relu=False),
                        weights.reshape(k, d, 1, 1).copy(), bias)
    sizes = ConvLayer(ConvSpec(d, 2, kernel=1, stride=1, padding=0, relu=False),
                      np.zeros((2, d, 1, 1), np.float32), np.full(2, 4.0, np.float32))
    return DetectorModel(trunk=[], heatmap_head=heatmap, size_head=sizes, input_size=input_size,
                         visual_threshold=visual_threshold)


def make_tiny_model(seed=0, size=16, widths=(4, 4), num_categories=3, heatmap_bias=None) -> DetectorModel:
    model = DetectorModel.initialise(default_architecture(num_categories, widths), (size, size),
                                     np.random.default_rng(seed), seed=seed)
    if heatmap_bias is not None:
        model.heatmap_head.bias[...] = heatmap_bias
    return model


@pytest.fixture
def linear_model():
    return make_linear_model


@pytest.fixture
def tiny_model():
    return make_tiny_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scenes():
    return generate(4, seed=3, size=32)
