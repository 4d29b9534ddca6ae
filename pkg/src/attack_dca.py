from __future__ import annotations

import logging
import time
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

from attack_core import (
    AttackBudget,
    as_iterate,
    attack_succeeded,
    finish_result,
    remove_pixels,
    select_target_pixels,
)
from errors import ZeroGradientError
from losses import PixelCrossEntropy, pixel_tuple
from results import AttackResult, IterationRecord
from tensor_autodiff import Pixel
from toy_detector import DetectorModel, forward, loss_and_grad

StepCallback = Callable[[np.ndarray, np.ndarray, np.ndarray], None]


def _loss_and_direction(model: DetectorModel, x: np.ndarray, pixels: Sequence[Pixel], category: int,
                        dtype: Any) -> Tuple[float, np.ndarray]:
    loss, grad = loss_and_grad(model, x, PixelCrossEntropy(pixel_tuple(pixels), category), dtype=dtype)
    grad = grad.astype(np.float64)
    norm = float(np.max(np.abs(grad))) if grad.size else 0.0
    if norm == 0.0:
        raise ZeroGradientError(category)
    return loss, grad / norm


def category_gradient(model: DetectorModel, x: np.ndarray, pixels: Sequence[Pixel], category: int,
                      *, dtype: Any = np.float32) -> np.ndarray:
    """Input gradient of the summed pixel cross-entropy toward ``category``, scaled to unit L-inf norm."""
    return _loss_and_direction(model, x, pixels, category, dtype)[1]


def dca_attack(model: DetectorModel, x: np.ndarray, budget: AttackBudget, t_attack: float,
               step_callback: Optional[StepCallback] = None, *, detected_only: bool = False,
               dtype: Any = np.float32) -> AttackResult:
    """
    Dense category-wise attack: every outer iteration sums the normalised
    cross-entropy gradients of all non-empty categories and ascends along
    sign(G) by eps/M. The perturbation is kept in the eps ball and the image
    in [0, 1] after every step. ``step_callback`` receives (x_prev, x_new,
    changed flat indices) after every outer iteration.
    """
    started = time.perf_counter()
    x0 = as_iterate(x)
    eps, step = budget.eps_dca, budget.dca_step
    r = np.zeros_like(x0)
    x_i = x0.copy()
    sets = select_target_pixels(forward(model, x_i, dtype=dtype), t_attack, model.visual_threshold, detected_only)

    telemetry: List[IterationRecord] = []
    iterations = 0
    while not attack_succeeded(sets) and iterations < budget.max_outer_dca:
        total = np.zeros_like(x0)
        loss_sum, attacked = 0.0, 0
        for category in sets.active_categories():
            try:
                loss, direction = _loss_and_direction(model, x_i, sets.pixels[category], category, dtype)
            except ZeroGradientError as exc:
                logging.debug("DCA iteration %d: %s", iterations + 1, exc)
                continue
            total += direction
            loss_sum += loss
            attacked += 1

        r = np.clip(r + step * np.sign(total), -eps, eps)
        r = np.clip(r, -x0, 1.0 - x0)
        x_next = np.clip(x0 + r, 0.0, 1.0)
        if step_callback is not None:
            step_callback(x_i, x_next, np.flatnonzero(x_next != x_i))
        sets = remove_pixels(model, x_i, x_next, sets, dtype=dtype)
        x_i = x_next
        iterations += 1
        telemetry.append(IterationRecord(
            outer=iterations,
            remaining_pixels=sets.count(),
            inner_steps=attacked,
            loss_sum=loss_sum,
        ))

    success = attack_succeeded(sets)
    logging.debug("DCA finished: success=%s iterations=%d", success, iterations)
    return finish_result(
        "dca", x_i, r, success, iterations, 0, time.perf_counter() - started, telemetry,
        budget={"eps_dca": eps, "max_outer_dca": budget.max_outer_dca},
        t_attack=sets.t_attack, detected_only=detected_only,
    )
