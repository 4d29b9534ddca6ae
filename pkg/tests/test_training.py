import numpy as np
import pytest

import training
from errors import RejectedInputError, TrainingFailureError
from synthetic_scenes import SceneSet, generate
from toy_detector import default_architecture
from training import (
    TrainConfig,
    build_targets,
    draw_gaussian,
    focal_loss,
    gaussian_radius,
    size_loss,
    train,
    training_seeds,
)

TINY = default_architecture(3, (4, 4))


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate(6, seed=0, size=32)


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=0.1, lr_steps=(2, 4))
    assert [round(cfg.learning_rate_at(e), 6) for e in range(6)] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]


def test_gaussian_radius_grows_with_box():
    assert 0 < gaussian_radius(4, 4) < gaussian_radius(8, 8)


def test_draw_gaussian_keeps_the_maximum():
    heatmap = np.zeros((9, 9))
    draw_gaussian(heatmap, (4, 4), 2)
    assert heatmap[4, 4] == 1.0
    assert heatmap[4, 2] < 1.0 and heatmap[0, 0] == 0.0
    heatmap[4, 5] = 0.99
    draw_gaussian(heatmap, (4, 4), 2)
    assert heatmap[4, 5] == 0.99


def test_draw_gaussian_at_border():
    heatmap = np.zeros((5, 5))
    draw_gaussian(heatmap, (0, 4), 3)
    assert heatmap[0, 4] == 1.0
    assert np.unravel_index(heatmap.argmax(), heatmap.shape) == (0, 4)


def test_targets_mark_one_center_per_object(tiny_dataset):
    targets = build_targets(tiny_dataset, 3, (16, 16), 2)
    objects = sum(len(s.annotations) for s in tiny_dataset)
    assert targets.heatmaps.shape == (6, 3, 16, 16)
    assert (targets.heatmaps == 1.0).sum() <= objects
    assert targets.size_mask.sum() <= objects
    assert targets.size_mask.sum() >= 1


def test_focal_loss_gradient_matches_finite_differences(rng):
    logits = rng.normal(size=(1, 2, 4, 4))
    target = np.clip(rng.uniform(size=(1, 2, 4, 4)), 0, 0.95)
    target[0, 0, 1, 1] = 1.0
    target[0, 1, 2, 3] = 0.2
    target[0, 0, 3, 0] = 0.0
    _, grad = focal_loss(logits, target)
    eps = 1e-6
    for index in [(0, 0, 1, 1), (0, 1, 2, 3), (0, 0, 3, 0)]:
        plus, minus = logits.copy(), logits.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric = (focal_loss(plus, target)[0] - focal_loss(minus, target)[0]) / (2 * eps)
        assert grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_size_loss_only_counts_centers():
    pred = np.array([[[[3.0, 100.0]]]])
    target = np.array([[[[1.0, 0.0]]]])
    mask = np.array([[[[1.0, 0.0]]]])
    loss, grad = size_loss(pred, target, mask)
    assert loss == 2.0
    assert grad[0, 0, 0, 0] == 1.0 and grad[0, 0, 0, 1] == 0.0


def test_empty_dataset_is_rejected():
    with pytest.raises(RejectedInputError):
        train(SceneSet(scenes=[], seed=0), TrainConfig(), 0)


def test_training_is_deterministic(tiny_dataset):
    cfg = TrainConfig(epochs=2, batch_size=4)
    a = train(tiny_dataset, cfg, 3, architecture=TINY)
    b = train(tiny_dataset, cfg, 3, architecture=TINY)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa, pb)
    c = train(tiny_dataset, cfg, 4, architecture=TINY)
    assert any(not np.array_equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_held_out_map_is_recorded(tiny_dataset):
    model = train(tiny_dataset, TrainConfig(epochs=1, batch_size=6), 0, architecture=TINY, held_out=tiny_dataset)
    assert 0.0 <= model.metadata["clean_map"] <= 1.0
    assert model.metadata["clean_map_scenes"] == 6


def test_divergence_names_the_epoch(tiny_dataset, monkeypatch):
    monkeypatch.setattr(training, "focal_loss", lambda logits, target: (float("nan"), np.zeros_like(logits)))
    with pytest.raises(TrainingFailureError) as info:
        train(tiny_dataset, TrainConfig(epochs=1, batch_size=6), 0, architecture=TINY)
    assert info.value.epoch == 1


def test_training_seeds_are_unique_and_sorted():
    assert training_seeds([2, 0, 2, 1]) == [0, 1, 2]
