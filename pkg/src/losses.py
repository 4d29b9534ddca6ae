from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from errors import RejectedInputError
from tensor_autodiff import ComputationTape, Node, Pixel


class HeadNodes(NamedTuple):
    """Tape nodes of the detector heads for a single image (batch of one)."""
    logits: Node
    probabilities: Node
    sizes: Node


class ScalarLossSpec(ABC):
    """A scalar function of the detector output, expressed with tape primitives."""

    @abstractmethod
    def record(self, tape: ComputationTape, heads: HeadNodes) -> Node:
        ...


@dataclass(frozen=True)
class ZeroLoss(ScalarLossSpec):
    def record(self, tape: ComputationTape, heads: HeadNodes) -> Node:
        return tape.sum(tape.scale(heads.logits, 0.0))


@dataclass(frozen=True)
class LogitSum(ScalarLossSpec):
    """sum_{k,r,c} coefficients[k, r, c] * logits[k, r, c]."""
    coefficients: np.ndarray

    def record(self, tape: ComputationTape, heads: HeadNodes) -> Node:
        coefficients = np.asarray(self.coefficients)
        if coefficients.shape != heads.logits.shape[1:]:
            raise RejectedInputError(
                f"coefficients {coefficients.shape} do not match logits {heads.logits.shape[1:]}"
            )
        return tape.sum(tape.scale(heads.logits, coefficients[None]))


@dataclass(frozen=True)
class ProbabilitySum(ScalarLossSpec):
    """Weighted sum of sigmoid heatmap scores."""
    coefficients: np.ndarray

    def record(self, tape: ComputationTape, heads: HeadNodes) -> Node:
        coefficients = np.asarray(self.coefficients)
        if coefficients.shape != heads.probabilities.shape[1:]:
            raise RejectedInputError(
                f"coefficients {coefficients.shape} do not match heatmap {heads.probabilities.shape[1:]}"
            )
        return tape.sum(tape.scale(heads.probabilities, coefficients[None]))


@dataclass(frozen=True)
class PixelCrossEntropy(ScalarLossSpec):
    """Sum over pixels of the K-way softmax cross-entropy toward ``category``."""
    pixels: Tuple[Pixel, ...]
    category: int

    def record(self, tape: ComputationTape, heads: HeadNodes) -> Node:
        return tape.softmax_cross_entropy(heads.logits, self.pixels, self.category)


@dataclass(frozen=True)
class WeightedLoss(ScalarLossSpec):
    """Linear combination a_1*L_1 + a_2*L_2 + ..."""
    terms: Tuple[Tuple[float, ScalarLossSpec], ...] = field(default_factory=tuple)

    def record(self, tape: ComputationTape, heads: HeadNodes) -> Node:
        if not self.terms:
            return ZeroLoss().record(tape, heads)
        total = None
        for weight, loss in self.terms:
            node = tape.scale(loss.record(tape, heads), float(weight))
            total = node if total is None else tape.add(total, node)
        return total


def pixel_tuple(pixels: Sequence[Pixel]) -> Tuple[Pixel, ...]:
    return tuple((int(r), int(c)) for r, c in pixels)
