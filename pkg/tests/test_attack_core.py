import numpy as np
import pytest

from attack_core import (
    AttackBudget,
    TargetPixelSets,
    as_iterate,
    attack_succeeded,
    remove_pixels,
    select_target_category,
    select_target_pixels,
    summed_softmax,
)
from errors import AttackConfigError, ContractViolationError, RejectedInputError
from toy_detector import DetectorOutput, decode, local_peaks

from conftest import make_linear_model


def _output(probabilities=None, logits=None):
    if logits is None:
        p = np.clip(np.asarray(probabilities, dtype=np.float64), 1e-9, 1 - 1e-9)
        logits = np.log(p / (1 - p))
    logits = np.asarray(logits, dtype=np.float64)
    return DetectorOutput(logits=logits, probabilities=1 / (1 + np.exp(-logits)),
                          sizes=np.full((2, *logits.shape[1:]), 8.0), stride=2)


# ------------------------------------------------------------
# Budget
# ------------------------------------------------------------
def test_default_budget():
    budget = AttackBudget()
    assert (budget.max_inner_sca, budget.max_outer_sca, budget.max_outer_dca) == (20, 50, 10)
    assert budget.eps_dca == pytest.approx(8 / 255)
    assert budget.dca_step == pytest.approx(0.8 / 255)


@pytest.mark.parametrize("kwargs, field", [
    ({"eps_dca": 17 / 255}, "eps_dca"),
    ({"eps_dca": 0.0}, "eps_dca"),
    ({"max_inner_sca": 0}, "max_inner_sca"),
    ({"max_outer_dca": -1}, "max_outer_dca"),
])
def test_invalid_budget_names_the_field(kwargs, field):
    with pytest.raises(AttackConfigError) as info:
        AttackBudget(**kwargs)
    assert info.value.field == field


def test_eps_ceiling_is_allowed():
    assert AttackBudget(eps_dca=16 / 255).eps_dca == 16 / 255


# ------------------------------------------------------------
# Target pixel sets
# ------------------------------------------------------------
def test_no_scores_means_empty_sets():
    sets = select_target_pixels(_output(np.zeros((3, 4, 4))), 0.1, 0.3)
    assert sets.is_empty()
    assert attack_succeeded(sets)


def test_runner_up_cell_is_targeted():
    probs = np.zeros((2, 4, 4))
    probs[1, 2, 3] = 0.25
    sets = select_target_pixels(_output(probs), 0.1, 0.3)
    assert sets.pixels == ((), ((2, 3),))
    assert decode(_output(probs), 0.3) == []
    assert not attack_succeeded(sets)


def test_t_attack_must_stay_below_visual_threshold():
    with pytest.raises(AttackConfigError):
        select_target_pixels(_output(np.zeros((1, 2, 2))), 0.3, 0.3)


def test_detected_subset_is_contained_and_covers_keypoints():
    rng = np.random.default_rng(0)
    for _ in range(10):
        output = _output(rng.uniform(size=(3, 6, 6)))
        sets = select_target_pixels(output, 0.1, 0.3)
        detected = sets.detected_subset(output, 0.3)
        only = select_target_pixels(output, 0.1, 0.3, detected_only=True)
        for k in range(3):
            assert set(detected.pixels[k]) <= set(sets.pixels[k])
            assert detected.pixels[k] == only.pixels[k]
        peaks = local_peaks(output.probabilities) & (output.probabilities >= 0.3)
        keypoints = {(int(k), int(r), int(c)) for k, r, c in zip(*np.nonzero(peaks))}
        cells = {(k, *p) for k in range(3) for p in detected.pixels[k]}
        assert keypoints <= cells
        assert keypoints == {(d.category, *d.keypoint) for d in decode(output, 0.3)}


def test_set_counts():
    sets = TargetPixelSets(pixels=(((0, 1),), ((1, 1), (0, 0))), t_attack=0.1, heatmap_shape=(2, 2))
    assert sets.count() == 3 and sets.count(0) == 1
    assert sets.active_categories() == [0, 1]


# ------------------------------------------------------------
# Target category
# ------------------------------------------------------------
def test_only_nonempty_set_is_selected():
    sets = TargetPixelSets(pixels=((), (), ((0, 0),)), t_attack=0.1, heatmap_shape=(1, 1))
    assert select_target_category(_output(logits=np.zeros((3, 1, 1))), sets) == 2


def test_largest_summed_softmax_wins():
    logits = np.zeros((2, 1, 4))
    logits[0] = np.log(3.4)
    logits[1, 0, 0] = np.log(3.4) + np.log(9.0)
    output = _output(logits=logits)
    sets = TargetPixelSets(pixels=(((0, 0), (0, 1), (0, 2), (0, 3)), ((0, 0),)), t_attack=0.1,
                           heatmap_shape=(1, 4))
    assert summed_softmax(output, sets.pixels[1], 1) == pytest.approx(0.9)
    assert summed_softmax(output, sets.pixels[0], 0) > 2.0
    assert select_target_category(output, sets) == 0


def test_tie_goes_to_the_smaller_category():
    sets = TargetPixelSets(pixels=(((0, 0),), ((0, 1),)), t_attack=0.1, heatmap_shape=(1, 2))
    logits = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert select_target_category(_output(logits=logits), sets) == 0


def test_excluded_category_is_skipped():
    sets = TargetPixelSets(pixels=(((0, 0),), ((0, 1),)), t_attack=0.1, heatmap_shape=(1, 2))
    logits = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert select_target_category(_output(logits=logits), sets, exclude={0}) == 1
    with pytest.raises(ContractViolationError):
        select_target_category(_output(logits=logits), sets, exclude={0, 1})


def test_empty_sets_have_no_target():
    sets = TargetPixelSets(pixels=((), ()), t_attack=0.1, heatmap_shape=(1, 1))
    with pytest.raises(ContractViolationError):
        select_target_category(_output(logits=np.zeros((2, 1, 1))), sets)


# ------------------------------------------------------------
# RemovePixels
# ------------------------------------------------------------
@pytest.fixture
def three_category_model():
    # p_k is high when x_k = 1 and below 0.1 when x_k = 0
    return make_linear_model(10 * np.eye(3), bias=[-5.0, -5.0, -5.0])


def test_unchanged_image_keeps_the_sets(three_category_model):
    x = np.ones((1, 1, 3))
    sets = TargetPixelSets(pixels=(((0, 0),), ((0, 0),), ((0, 0),)), t_attack=0.1, heatmap_shape=(1, 1))
    assert remove_pixels(three_category_model, x, x.copy(), sets) is sets


def test_step_suppressing_one_pixel_removes_only_that_pixel(three_category_model):
    x_prev = np.ones((1, 1, 3))
    x_new = np.array([[[0.0, 1.0, 1.0]]])
    sets = TargetPixelSets(pixels=(((0, 0),), ((0, 0),), ((0, 0),)), t_attack=0.1, heatmap_shape=(1, 1))
    pruned = remove_pixels(three_category_model, x_prev, x_new, sets)
    assert pruned.pixels == ((), ((0, 0),), ((0, 0),))


def test_remove_pixels_never_adds(three_category_model):
    sets = TargetPixelSets(pixels=(((0, 0),), (), ()), t_attack=0.1, heatmap_shape=(1, 1))
    pruned = remove_pixels(three_category_model, np.zeros((1, 1, 3)), np.ones((1, 1, 3)), sets)
    assert pruned.pixels == (((0, 0),), (), ())


def test_suppressing_everything_is_success(three_category_model):
    sets = TargetPixelSets(pixels=(((0, 0),), ((0, 0),), ((0, 0),)), t_attack=0.1, heatmap_shape=(1, 1))
    pruned = remove_pixels(three_category_model, np.ones((1, 1, 3)), np.zeros((1, 1, 3)), sets)
    assert attack_succeeded(pruned)


def test_fresh_sets_on_a_detecting_image_are_not_success():
    output = _output(logits=np.array([[[5.0]], [[-5.0]], [[-5.0]]]))
    assert not attack_succeeded(select_target_pixels(output, 0.1, 0.3))


def test_attack_input_must_be_an_image():
    with pytest.raises(RejectedInputError):
        as_iterate(np.full((2, 2, 3), 1.5))
    x = np.full((2, 2, 3), 0.5, dtype=np.float32)
    assert as_iterate(x).dtype == np.float64
