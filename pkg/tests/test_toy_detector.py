import numpy as np
import pytest

from errors import RejectedInputError
from losses import LogitSum
from toy_detector import (
    ConvLayer,
    ConvSpec,
    DetectorModel,
    DetectorOutput,
    decode,
    default_architecture,
    forward,
    grad_wrt_input,
    load_model,
    local_peaks,
    save_model,
)

from conftest import make_tiny_model


def _output(probabilities, size=16.0, stride=4):
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim == 2:
        probabilities = probabilities[None]
    clipped = np.clip(probabilities, 1e-9, 1 - 1e-9)
    sizes = np.full((2, *probabilities.shape[1:]), size)
    return DetectorOutput(logits=np.log(clipped / (1 - clipped)), probabilities=probabilities,
                          sizes=sizes, stride=stride)


def _bump(shape, center, peak, sigma=1.5):
    rows, cols = np.indices(shape)
    return peak * np.exp(-((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2 * sigma ** 2))


def test_zero_model_gives_half_probabilities():
    model = DetectorModel.zeros(default_architecture(), (16, 16))
    output = forward(model, np.zeros((16, 16, 3)))
    assert output.logits.shape == (3, 8, 8)
    assert not np.any(output.logits)
    assert np.all(output.probabilities == 0.5)
    assert output.sizes.shape == (2, 8, 8)


def test_heatmap_size_follows_total_stride():
    model = make_tiny_model(size=32, widths=(4, 4, 4))
    assert model.total_stride == 2
    assert model.heatmap_size == (16, 16)


def test_forward_is_deterministic(rng):
    model = make_tiny_model(seed=9)
    image = rng.uniform(size=(16, 16, 3))
    a, b = forward(model, image), forward(model, image)
    assert np.array_equal(a.logits, b.logits)
    assert np.array_equal(a.probabilities, b.probabilities)
    assert np.array_equal(a.sizes, b.sizes)


@pytest.mark.parametrize("shape", [(15, 16, 3), (16, 16, 1), (16, 16)])
def test_forward_rejects_wrong_shape(shape):
    with pytest.raises(RejectedInputError):
        forward(make_tiny_model(), np.zeros(shape))


def test_visual_threshold_must_be_a_probability():
    with pytest.raises(RejectedInputError):
        DetectorModel.zeros(default_architecture(), (16, 16), visual_threshold=1.0)


def test_decode_below_threshold_is_empty():
    assert decode(_output(np.full((16, 16), 0.2)), 0.3) == []


def test_decode_single_bump():
    detections = decode(_output(_bump((16, 16), (8, 8), 0.9)), 0.3)
    assert len(detections) == 1
    det = detections[0]
    assert det.keypoint == (8, 8)
    assert det.category == 0
    assert det.score == pytest.approx(0.9)
    assert det.box[2:] == (16.0, 16.0)
    assert det.box[:2] == (34.0, 34.0)


def test_decode_keeps_only_the_larger_of_overlapping_bumps():
    heatmap = np.maximum(_bump((16, 16), (8, 8), 0.9, sigma=0.6), _bump((16, 16), (9, 9), 0.8, sigma=0.6))
    detections = decode(_output(heatmap), 0.3)
    assert [d.keypoint for d in detections] == [(8, 8)]


def test_decode_clips_boxes_to_the_image():
    detections = decode(_output(_bump((16, 16), (0, 0), 0.9), size=30.0), 0.3)
    assert len(detections) == 1
    cx, cy, w, h = detections[0].box
    assert cx - w / 2 >= 0 and cy - h / 2 >= 0
    assert cx + w / 2 <= 64 and cy + h / 2 <= 64


def test_local_peaks_matches_exhaustive_scan():
    rng = np.random.default_rng(7)
    for _ in range(20):
        heatmap = rng.uniform(size=(2, 6, 6))
        mask = local_peaks(heatmap)
        for k in range(2):
            for r in range(6):
                for c in range(6):
                    window = heatmap[k, max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
                    assert mask[k, r, c] == (heatmap[k, r, c] == window.max())


def test_plateau_yields_a_single_peak():
    heatmap = np.zeros((1, 5, 5))
    heatmap[0, 1:3, 1:3] = 0.7
    assert list(zip(*np.nonzero(local_peaks(heatmap)[0]))) == [(1, 1)]


def test_decode_is_complete_and_idempotent():
    rng = np.random.default_rng(8)
    output = _output(rng.uniform(size=(3, 6, 6)), stride=2)
    first, second = decode(output, 0.5), decode(output, 0.5)
    assert first == second
    assert all(d.score >= 0.5 for d in first)
    expected = {(int(k), int(r), int(c)) for k, r, c in zip(*np.nonzero(local_peaks(output.probabilities)))
                if output.probabilities[k, r, c] >= 0.5}
    assert {(d.category, *d.keypoint) for d in first} == expected


def test_model_file_round_trip(tmp_path, rng):
    model = make_tiny_model(seed=6)
    model.metadata["clean_map"] = 0.5
    save_model(model, tmp_path / "m.cwm")
    loaded = load_model(tmp_path / "m.cwm")

    assert loaded.model_id == model.model_id == "seed-6"
    assert loaded.visual_threshold == model.visual_threshold
    assert loaded.metadata["clean_map"] == 0.5
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    image = rng.uniform(size=(16, 16, 3))
    assert np.array_equal(forward(model, image).logits, forward(loaded, image).logits)


def test_load_model_rejects_other_formats(tmp_path):
    header = b'{"format": "something-else"}'
    path = tmp_path / "bad.cwm"
    path.write_bytes(len(header).to_bytes(4, "little") + header)
    with pytest.raises(RejectedInputError):
        load_model(path)


def _golden_model():
    # picks channel 0 at even pixels, subtracts 0.5, then scales by +-4 ln 3 per category
    trunk_weight = np.zeros((1, 3, 3, 3), np.float32)
    trunk_weight[0, 0, 1, 1] = 1.0
    trunk = ConvLayer(ConvSpec(3, 1, kernel=3, stride=2, padding=1, relu=True), trunk_weight,
                      np.array([-0.5], np.float32))
    scale = 4 * np.log(3.0)
    heatmap = ConvLayer(ConvSpec(1, 2, kernel=1, stride=1, padding=0, relu=False),
                        np.array([scale, -scale], np.float32).reshape(2, 1, 1, 1), np.zeros(2, np.float32))
    sizes = ConvLayer(ConvSpec(1, 2, kernel=1, stride=1, padding=0, relu=False),
                      np.zeros((2, 1, 1, 1), np.float32), np.array([12.0, 8.0], np.float32))
    return DetectorModel(trunk=[trunk], heatmap_head=heatmap, size_head=sizes, input_size=(4, 4))


def test_forward_golden_probability_map():
    image = np.zeros((4, 4, 3))
    image[0, 0, 0], image[0, 2, 0], image[2, 0, 0], image[2, 2, 0] = 0.5, 1.0, 0.2, 0.75
    output = forward(_golden_model(), image)

    expected = np.array([[[0.5, 0.9], [0.5, 0.75]],
                         [[0.5, 0.1], [0.5, 0.25]]])
    assert output.probabilities.shape == (2, 2, 2)
    assert np.allclose(output.probabilities, expected, atol=1e-6)
    assert np.allclose(output.sizes[0], 12.0) and np.allclose(output.sizes[1], 8.0)

    detections = decode(output, 0.3, image_size=(4, 4))
    assert [(d.category, d.keypoint) for d in detections] == [(0, (0, 1)), (1, (0, 0))]
    assert detections[0].score == pytest.approx(0.9, abs=1e-6)


def test_default_trunk_sees_a_whole_object(rng):
    model = DetectorModel.initialise(default_architecture(), (64, 64), rng)
    assert model.heatmap_size == (32, 32)
    coefficients = np.zeros((3, 32, 32))
    coefficients[:, 16, 16] = 1.0
    grad = grad_wrt_input(model, rng.uniform(size=(64, 64, 3)), LogitSum(coefficients), dtype=np.float64)

    rows = np.nonzero(np.abs(grad).sum(axis=(1, 2)))[0]
    cols = np.nonzero(np.abs(grad).sum(axis=(0, 2)))[0]
    # heatmap row 16 reads input rows 18 to 46 through the dilated trunk
    assert rows.min() >= 18 and rows.max() <= 46
    assert cols.min() >= 18 and cols.max() <= 46
    assert rows.max() - rows.min() + 1 >= 25
    assert cols.max() - cols.min() + 1 >= 25
