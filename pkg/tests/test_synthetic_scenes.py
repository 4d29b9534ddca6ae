import itertools

import numpy as np
import pytest

import config as config
from errors import ArtifactMissingError, RejectedInputError
from synthetic_scenes import (
    category_histogram,
    generate,
    read_ppm,
    read_scene_set,
    shape_mask,
    write_ppm,
    write_scene_set,
)
from utils import box_iou


def test_generate_is_deterministic():
    a, b = generate(1, seed=7), generate(1, seed=7)
    assert np.array_equal(a[0].image, b[0].image)
    assert a[0].annotations == b[0].annotations


def test_different_seeds_differ():
    assert not np.array_equal(generate(1, seed=7)[0].image, generate(1, seed=8)[0].image)


def test_zero_count_is_rejected():
    with pytest.raises(RejectedInputError):
        generate(0, seed=0)


def test_scene_invariants():
    scenes = generate(60, seed=0)
    for scene in scenes:
        assert scene.image.shape == (64, 64, 3)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert config.MIN_OBJECTS <= len(scene.annotations) <= config.MAX_OBJECTS
        for ann in scene.annotations:
            assert 10 <= ann.box[2] <= 32 and 10 <= ann.box[3] <= 32
            assert 0 <= ann.category < config.NUM_CATEGORIES
        for a, b in itertools.combinations(scene.annotations, 2):
            assert box_iou(a.box, b.box) <= config.MAX_PAIR_IOU


def test_shape_centroid_lies_inside_its_box():
    for scene in generate(20, seed=2):
        for ann in scene.annotations:
            mask = shape_mask(ann.category, ann.box, 64)
            rows, cols = np.nonzero(mask)
            cx, cy, w, h = ann.box
            assert cx - w / 2 <= cols.mean() <= cx + w / 2
            assert cy - h / 2 <= rows.mean() <= cy + h / 2


def test_category_histogram_is_near_uniform():
    histogram = category_histogram(generate(2000, seed=0))
    total = sum(histogram.values())
    for k in range(config.NUM_CATEGORIES):
        assert abs(histogram[k] - total / config.NUM_CATEGORIES) <= 0.1 * total / config.NUM_CATEGORIES


def test_ppm_round_trip_is_within_one_level(tmp_path, rng):
    image = rng.uniform(size=(8, 8, 3))
    write_ppm(tmp_path / "x.ppm", image)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6")
    assert np.max(np.abs(read_ppm(tmp_path / "x.ppm") - image)) <= 1 / 255


def test_scene_set_directory_round_trip(tmp_path):
    scenes = generate(3, seed=4)
    write_scene_set(scenes, tmp_path / "data")
    assert sorted(p.name for p in (tmp_path / "data").iterdir())[:2] == ["00000.json", "00000.ppm"]

    loaded = read_scene_set(tmp_path / "data")
    assert loaded.seed == 4 and len(loaded) == 3
    for original, copy in zip(scenes, loaded):
        assert copy.annotations == original.annotations
        assert np.max(np.abs(copy.image - original.image)) <= 1 / 255


def test_missing_dataset_is_reported(tmp_path):
    with pytest.raises(ArtifactMissingError):
        read_scene_set(tmp_path / "nowhere")
