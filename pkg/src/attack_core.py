from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Collection, List, Optional, Sequence, Tuple

import numpy as np

import config as config
from errors import AttackConfigError, ContractViolationError, RejectedInputError
from eval_metrics import perceptibility
from results import AttackResult, IterationRecord
from tensor_autodiff import Pixel, softmax
from toy_detector import DetectorModel, DetectorOutput, forward


@dataclass(frozen=True)
class AttackBudget:
    max_inner_sca: int = config.MAX_INNER_SCA
    max_outer_dca: int = config.MAX_OUTER_DCA
    eps_dca: float = config.EPS_DCA
    max_outer_sca: int = config.MAX_OUTER_SCA

    def __post_init__(self) -> None:
        for name in ("max_inner_sca", "max_outer_dca", "max_outer_sca"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise AttackConfigError(name, f"must be a positive integer, got {value}")
        if not math.isfinite(self.eps_dca) or self.eps_dca <= 0:
            raise AttackConfigError("eps_dca", f"must be positive, got {self.eps_dca}")
        if self.eps_dca > config.EPS_CEILING + 1e-12:
            raise AttackConfigError("eps_dca", f"must be <= 16/255, got {self.eps_dca:.6f}")

    @property
    def dca_step(self) -> float:
        return self.eps_dca / self.max_outer_dca

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TargetPixelSets:
    """Per-category heatmap cells (row, col) that still score >= threshold."""
    pixels: Tuple[Tuple[Pixel, ...], ...]
    t_attack: float
    heatmap_shape: Tuple[int, int]

    @property
    def num_categories(self) -> int:
        return len(self.pixels)

    def count(self, category: Optional[int] = None) -> int:
        if category is not None:
            return len(self.pixels[category])
        return sum(len(p) for p in self.pixels)

    def is_empty(self) -> bool:
        return self.count() == 0

    def active_categories(self) -> List[int]:
        return [k for k, p in enumerate(self.pixels) if p]

    def detected_subset(self, output: DetectorOutput, visual_threshold: float) -> "TargetPixelSets":
        probs = output.probabilities
        kept = tuple(tuple(p for p in cells if probs[k, p[0], p[1]] >= visual_threshold)
                     for k, cells in enumerate(self.pixels))
        return TargetPixelSets(kept, visual_threshold, self.heatmap_shape)


def pixel_index(pixels: Sequence[Pixel]) -> Tuple[np.ndarray, np.ndarray]:
    if not pixels:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    arr = np.asarray(pixels, dtype=np.intp).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def _cells_above(probabilities: np.ndarray, threshold: float) -> Tuple[Tuple[Pixel, ...], ...]:
    return tuple(
        tuple((int(r), int(c)) for r, c in np.argwhere(probabilities[k] >= threshold))
        for k in range(probabilities.shape[0])
    )


def select_target_pixels(output: DetectorOutput, t_attack: float, visual_threshold: float,
                         detected_only: bool = False) -> TargetPixelSets:
    """
    S_k = every heatmap cell of category k with probability >= t_attack, which
    covers the detected keypoints and the runner-up cells just below the
    visual threshold. ``detected_only`` thresholds at the visual threshold
    instead (runner-up pixels excluded).
    """
    if detected_only:
        threshold = visual_threshold
    else:
        if not 0.0 < t_attack < visual_threshold:
            raise AttackConfigError(
                "t_attack", f"must lie in (0, visual_threshold={visual_threshold}), got {t_attack}"
            )
        threshold = t_attack
    return TargetPixelSets(_cells_above(output.probabilities, threshold), threshold, output.heatmap_size)


def summed_softmax(output: DetectorOutput, pixels: Sequence[Pixel], category: int) -> float:
    """Sum over ``pixels`` of the K-way softmax score of ``category``."""
    rows, cols = pixel_index(pixels)
    if rows.size == 0:
        return 0.0
    z = output.logits[:, rows, cols].astype(np.float64)
    return float(softmax(z, axis=0)[category].sum())


def select_target_category(output: DetectorOutput, sets: TargetPixelSets, exclude: Collection[int] = ()) -> int:
    """Category with the largest summed softmax over its set; ``exclude`` skips categories."""
    best, best_score = None, -math.inf
    for k in sets.active_categories():
        if k in exclude:
            continue
        score = summed_softmax(output, sets.pixels[k], k)
        if score > best_score:
            best, best_score = k, score
    if best is None:
        raise ContractViolationError("no target category: every candidate pixel set is empty")
    return best


def prune_pixels(sets: TargetPixelSets, output: DetectorOutput) -> TargetPixelSets:
    probs = output.probabilities
    kept = tuple(tuple(p for p in cells if probs[k, p[0], p[1]] >= sets.t_attack)
                 for k, cells in enumerate(sets.pixels))
    return TargetPixelSets(kept, sets.t_attack, sets.heatmap_shape)


def remove_pixels(model: DetectorModel, x_prev: np.ndarray, x_new: np.ndarray, sets: TargetPixelSets,
                  *, dtype: Any = np.float32) -> TargetPixelSets:
    """Drop every pixel whose probability on ``x_new`` fell below t_attack. Never adds pixels."""
    if np.array_equal(x_prev, x_new):
        return sets
    pruned = prune_pixels(sets, forward(model, x_new, dtype=dtype))
    if pruned.count() != sets.count():
        logging.debug("RemovePixels: %d -> %d target pixels", sets.count(), pruned.count())
    return pruned


def attack_succeeded(sets: TargetPixelSets) -> bool:
    return sets.is_empty()


def finish_result(method: str, adversarial: np.ndarray, perturbation: np.ndarray,
                  success: bool, outer: int, inner: int, elapsed: float, telemetry: List[IterationRecord],
                  **extra: Any) -> AttackResult:
    p_l2, p_l0 = perceptibility(perturbation)
    linf = float(np.max(np.abs(perturbation))) if perturbation.size else 0.0
    return AttackResult(
        method=method,
        adversarial=adversarial,
        perturbation=perturbation,
        success=success,
        outer_iterations=outer,
        inner_iterations=inner,
        p_l0=p_l0,
        p_l2=p_l2,
        linf=linf,
        elapsed_s=elapsed,
        telemetry=telemetry,
        **extra,
    )


def as_iterate(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise RejectedInputError("attack input must lie in [0, 1]")
    return x.copy()
