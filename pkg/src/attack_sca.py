"""
Sparse category-wise attack.

Each outer iteration picks the category whose pixel set scores highest,
walks that set's summed score across the local decision boundary with a
category-wise DeepFool step, linearises the boundary there and projects the
current image onto it with a greedy coordinate solver, so only a handful of
input coordinates change per step.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence, Set, Tuple

import numpy as np

import config as config
from attack_core import (
    AttackBudget,
    as_iterate,
    attack_succeeded,
    finish_result,
    pixel_index,
    remove_pixels,
    select_target_category,
    select_target_pixels,
    summed_softmax,
)
from errors import DegenerateBoundaryError
from losses import LogitSum
from results import AttackResult, IterationRecord
from tensor_autodiff import Pixel
from toy_detector import DetectorModel, forward, loss_and_grad

StepCallback = Callable[[np.ndarray, np.ndarray, np.ndarray], None]
Box = Tuple[float, float]


@dataclass
class HyperplaneApprox:
    normal: np.ndarray  # w, same shape as the image
    anchor: np.ndarray  # x_B, lies on {x : w.(x - x_B) = 0}


@dataclass
class DeepFoolResult:
    x_boundary: np.ndarray
    crossed: bool
    steps: int
    perturbation: np.ndarray  # accumulated step before overshoot and clipping
    threshold_boundary: bool = False  # last boundary walked was the detection threshold


@dataclass
class SolverResult:
    x: np.ndarray
    selected: np.ndarray  # flat indices of modified coordinates, in modification order
    complete: bool


def category_sums(logits: np.ndarray, pixels: Sequence[Pixel]) -> np.ndarray:
    """Per-category logit sum over ``pixels``, shape (K,)."""
    rows, cols = pixel_index(pixels)
    return logits[:, rows, cols].astype(np.float64).sum(axis=1)


def _difference_coefficients(shape: Tuple[int, int, int], pixels: Sequence[Pixel], plus: int,
                             minus: Optional[int]) -> np.ndarray:
    coefficients = np.zeros(shape, dtype=np.float64)
    rows, cols = pixel_index(pixels)
    coefficients[plus, rows, cols] += 1.0
    if minus is not None:
        coefficients[minus, rows, cols] -= 1.0
    return coefficients


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def category_margin(logits: np.ndarray, pixels: Sequence[Pixel], target: int) -> Tuple[float, Optional[int]]:
    """sum_S z_target - max_{k != target} sum_S z_k and that competitor (None for a single category)."""
    sums = category_sums(logits, pixels)
    if sums.size == 1:
        return float(sums[target]), None
    others = sums.copy()
    others[target] = -np.inf
    competitor = int(np.argmax(others))
    return float(sums[target] - sums[competitor]), competitor


def threshold_margin(logits: np.ndarray, pixels: Sequence[Pixel], target: int, t_attack: float) -> float:
    """sum_S z_target - |S| * logit(t_attack); negative once the mean target logit is below the threshold."""
    return float(category_sums(logits, pixels)[target] - len(pixels) * logit(t_attack))


def cw_deepfool(model: DetectorModel, x: np.ndarray, target_pixels: Sequence[Pixel], target_category: int,
                *, overshoot: float = config.DEEPFOOL_OVERSHOOT, max_steps: int = config.DEEPFOOL_MAX_STEPS,
                box: Box = (0.0, 1.0), t_attack: Optional[float] = None, dtype: Any = np.float32
                ) -> DeepFoolResult:
    """
    DeepFool on F(x) = sum_S z_target - max_{k != target} sum_S z_k.

    Steps r = -F/|grad F|^2 * grad F are accumulated and the iterate is
    x + overshoot * r_total clipped to ``box``; stops once F < 0 or after
    ``max_steps`` steps (returned with crossed=False).

    Every category has its own sigmoid, so target cells past the category
    boundary can still score >= t_attack. With ``t_attack`` given, F is then
    replaced by ``threshold_margin`` and the walk continues to the detection
    threshold; the result is flagged ``threshold_boundary``.
    """
    x = np.asarray(x, dtype=np.float64)
    r_total = np.zeros_like(x)
    x_i = x.copy()
    steps = 0
    on_threshold = False
    while True:
        output = forward(model, x_i, dtype=dtype)
        f_value, competitor = category_margin(output.logits, target_pixels, target_category)
        if f_value < 0 and t_attack is not None:
            below = threshold_margin(output.logits, target_pixels, target_category, t_attack)
            if below >= 0 or on_threshold:
                f_value, competitor, on_threshold = below, None, True
        if f_value < 0:
            return DeepFoolResult(x_i, True, steps, r_total, on_threshold)
        if steps >= max_steps:
            return DeepFoolResult(x_i, False, steps, r_total, on_threshold)

        coefficients = _difference_coefficients(output.logits.shape, target_pixels, target_category, competitor)
        _, grad = loss_and_grad(model, x_i, LogitSum(coefficients), dtype=dtype)
        grad = grad.astype(np.float64)
        norm_sq = float(np.sum(grad * grad))
        if norm_sq == 0.0:
            logging.debug("CW-DF: zero gradient after %d steps", steps)
            return DeepFoolResult(x_i, False, steps, r_total, on_threshold)

        r_total += -(f_value / norm_sq) * grad
        x_i = np.clip(x + overshoot * r_total, box[0], box[1])
        steps += 1


def approx_boundary(model: DetectorModel, x_boundary: np.ndarray, x: np.ndarray,
                    target_pixels: Sequence[Pixel], *, dtype: Any = np.float32) -> HyperplaneApprox:
    """w = grad(sum_S z_new - sum_S z_old) at x_B, new/old being the winning category at x_B / x."""
    old = int(np.argmax(category_sums(forward(model, x, dtype=dtype).logits, target_pixels)))
    output_b = forward(model, x_boundary, dtype=dtype)
    new = int(np.argmax(category_sums(output_b.logits, target_pixels)))
    if new == old:
        raise DegenerateBoundaryError(f"winning category {old} unchanged at the boundary point")

    coefficients = _difference_coefficients(output_b.logits.shape, target_pixels, new, old)
    _, grad = loss_and_grad(model, x_boundary, LogitSum(coefficients), dtype=dtype)
    normal = grad.astype(np.float64)
    if not np.any(normal):
        raise DegenerateBoundaryError("boundary normal is zero")
    return HyperplaneApprox(normal=normal, anchor=np.asarray(x_boundary, dtype=np.float64).copy())


def threshold_boundary(model: DetectorModel, x_boundary: np.ndarray, target_pixels: Sequence[Pixel],
                       target_category: int, *, dtype: Any = np.float32) -> HyperplaneApprox:
    """w = -grad(sum_S z_target) at x_B: the plane where the summed target logit meets the threshold."""
    shape = (model.num_categories, *model.heatmap_size)
    coefficients = -_difference_coefficients(shape, target_pixels, target_category, None)
    _, grad = loss_and_grad(model, x_boundary, LogitSum(coefficients), dtype=dtype)
    normal = grad.astype(np.float64)
    if not np.any(normal):
        raise DegenerateBoundaryError(f"category {target_category} logits do not depend on the image")
    return HyperplaneApprox(normal=normal, anchor=np.asarray(x_boundary, dtype=np.float64).copy())


def linear_solver(x: np.ndarray, w: np.ndarray, x_boundary: np.ndarray, box: Box = (0.0, 1.0),
                  overshoot: float = config.SOLVER_OVERSHOOT) -> SolverResult:
    """
    Greedy sparse projection onto {x : w.(x - x_B) = 0}.

    The residual w.(x - x_B) is negative on the original side of the
    boundary. Coordinates are visited by decreasing |w_d|; each one is moved
    by overshoot * |residual| / |w_d| in the direction of sign(w_d) and
    clipped to ``box``, until the residual is >= 0. Untouched coordinates keep
    their exact values.
    """
    x_flat = np.asarray(x, dtype=np.float64).ravel().copy()
    w_flat = np.asarray(w, dtype=np.float64).ravel()
    residual = float(np.dot(w_flat, x_flat - np.asarray(x_boundary, dtype=np.float64).ravel()))
    selected: List[int] = []
    if residual >= 0:
        return SolverResult(x_flat.reshape(np.shape(x)), np.zeros(0, dtype=np.intp), True)

    lo, hi = box
    order = np.argsort(-np.abs(w_flat), kind="stable")
    for d in order:
        w_d = w_flat[d]
        if w_d == 0.0:
            break
        old = x_flat[d]
        new = min(max(old + np.sign(w_d) * overshoot * abs(residual) / abs(w_d), lo), hi)
        if new == old:
            continue
        x_flat[d] = new
        residual += w_d * (new - old)
        selected.append(int(d))
        if residual >= 0:
            break

    return SolverResult(x_flat.reshape(np.shape(x)), np.asarray(selected, dtype=np.intp), residual >= 0)


def sca_attack(model: DetectorModel, x: np.ndarray, budget: AttackBudget, t_attack: float,
               step_callback: Optional[StepCallback] = None, *, detected_only: bool = False,
               dtype: Any = np.float32) -> AttackResult:
    started = time.perf_counter()
    x0 = as_iterate(x)
    x_i = x0.copy()
    output = forward(model, x_i, dtype=dtype)
    sets = select_target_pixels(output, t_attack, model.visual_threshold, detected_only)
    logging.debug("SCA: %d target pixels at start", sets.count())

    telemetry: List[IterationRecord] = []
    stalled: Set[int] = set()
    outer = inner_total = 0
    while not attack_succeeded(sets) and outer < budget.max_outer_sca:
        if stalled.issuperset(sets.active_categories()):
            logging.debug("SCA stalled on categories %s", sorted(stalled))
            break
        target = select_target_category(output, sets, exclude=stalled)
        start_pixels = sets.pixels[target]
        score = summed_softmax(output, start_pixels, target)

        x_ij = x_i
        j, degenerate = 0, False
        while j < budget.max_inner_sca and sets.pixels[target]:
            target_pixels = sets.pixels[target]
            deepfool = cw_deepfool(model, x_ij, target_pixels, target, t_attack=sets.t_attack, dtype=dtype)
            try:
                if deepfool.threshold_boundary:
                    plane = threshold_boundary(model, deepfool.x_boundary, target_pixels, target, dtype=dtype)
                else:
                    plane = approx_boundary(model, deepfool.x_boundary, x_ij, target_pixels, dtype=dtype)
            except DegenerateBoundaryError as exc:
                logging.debug("SCA outer %d inner %d: %s", outer + 1, j, exc)
                degenerate = True
                break
            solved = linear_solver(x_ij, plane.normal, plane.anchor)
            if solved.selected.size == 0:
                logging.debug("SCA outer %d inner %d: solver moved no coordinate", outer + 1, j)
                break
            if step_callback is not None:
                step_callback(x_ij, solved.x, solved.selected)
            sets = remove_pixels(model, x_ij, solved.x, sets, dtype=dtype)
            x_ij = solved.x
            j += 1

        moved = not np.array_equal(x_ij, x_i)
        x_i = x_ij
        inner_total += j
        outer += 1
        output = forward(model, x_i, dtype=dtype)
        telemetry.append(IterationRecord(
            outer=outer,
            remaining_pixels=sets.count(),
            inner_steps=j,
            target_category=target,
            target_score=score,
            target_score_after=summed_softmax(output, start_pixels, target),
            degenerate=degenerate,
        ))
        if moved:
            stalled.clear()
        else:
            # same image, same heatmap: this category would repeat the same steps
            logging.debug("SCA outer %d left the image unchanged; setting category %d aside", outer, target)
            stalled.add(target)

    success = attack_succeeded(sets)
    perturbation = x_i - x0
    logging.debug("SCA finished: success=%s outer=%d inner=%d", success, outer, inner_total)
    return finish_result(
        "sca", x_i, perturbation, success, outer, inner_total, time.perf_counter() - started, telemetry,
        t_attack=sets.t_attack, detected_only=detected_only,
    )
