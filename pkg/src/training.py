from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config as config
from errors import RejectedInputError, TrainingFailureError
from eval_metrics import clean_map
from synthetic_scenes import SceneSet
from tensor_autodiff import ComputationTape, sigmoid
from toy_detector import Architecture, DetectorModel, default_architecture, run_network


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = config.EPOCHS
    learning_rate: float = config.LEARNING_RATE
    batch_size: int = config.BATCH_SIZE
    momentum: float = config.MOMENTUM
    lr_steps: Tuple[int, ...] = config.LR_STEPS
    size_weight: float = config.SIZE_LOSS_WEIGHT
    grad_clip: float = config.GRAD_CLIP

    def learning_rate_at(self, epoch: int) -> float:
        drops = sum(1 for step in self.lr_steps if epoch >= step)
        return self.learning_rate * (0.1 ** drops)


# ------------------------------------------------------------
# Target construction (keypoint splatting)
# ------------------------------------------------------------
def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner shift that keeps IoU >= min_overlap, as used for keypoint heatmaps."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2

    a2, b2 = 4, 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3, b3 = 4 * min_overlap, -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, center: Tuple[int, int], radius: int) -> None:
    """Splat a Gaussian peak of height 1 at ``center`` (row, col), keeping the elementwise max."""
    diameter = 2 * radius + 1
    sigma = diameter / 6
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    gaussian = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))

    r, c = center
    h, w = heatmap.shape
    top, bottom = min(r, radius), min(h - r, radius + 1)
    left, right = min(c, radius), min(w - c, radius + 1)
    region = heatmap[r - top:r + bottom, c - left:c + right]
    patch = gaussian[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


@dataclass
class DetectionTargets:
    heatmaps: np.ndarray     # N x K x h x w
    sizes: np.ndarray        # N x 2 x h x w
    size_mask: np.ndarray    # N x 1 x h x w


def build_targets(scene_set: SceneSet, num_categories: int, heatmap_size: Tuple[int, int], stride: int
                  ) -> DetectionTargets:
    n = len(scene_set)
    h, w = heatmap_size
    heatmaps = np.zeros((n, num_categories, h, w), np.float32)
    sizes = np.zeros((n, 2, h, w), np.float32)
    mask = np.zeros((n, 1, h, w), np.float32)
    for i, scene in enumerate(scene_set):
        for ann in scene.annotations:
            cx, cy, bw, bh = ann.box
            r = min(int(cy / stride), h - 1)
            c = min(int(cx / stride), w - 1)
            radius = max(0, int(gaussian_radius(bh / stride, bw / stride)))
            draw_gaussian(heatmaps[i, ann.category], (r, c), radius)
            sizes[i, :, r, c] = (bw, bh)
            mask[i, 0, r, c] = 1.0
    return DetectionTargets(heatmaps, sizes, mask)


# ------------------------------------------------------------
# Losses (closed form value + gradient w.r.t. the head outputs)
# ------------------------------------------------------------
def focal_loss(logits: np.ndarray, target: np.ndarray, alpha: float = config.FOCAL_ALPHA,
               beta: float = config.FOCAL_BETA) -> Tuple[float, np.ndarray]:
    """Penalty-reduced pixel-wise focal loss, normalised by the number of positives."""
    p = np.clip(sigmoid(logits.astype(np.float64)), 1e-4, 1 - 1e-4)
    pos = target >= 1.0
    neg_weight = (1.0 - target) ** beta
    num_pos = max(int(pos.sum()), 1)

    pos_loss = -((1 - p) ** alpha) * np.log(p)
    neg_loss = -neg_weight * (p ** alpha) * np.log(1 - p)
    loss = np.where(pos, pos_loss, neg_loss).sum() / num_pos

    pos_grad = ((1 - p) ** alpha) * (alpha * p * np.log(p) - (1 - p))
    neg_grad = neg_weight * (p ** alpha) * (p - alpha * (1 - p) * np.log(1 - p))
    grad = np.where(pos, pos_grad, neg_grad) / num_pos
    return float(loss), grad.astype(logits.dtype)


def size_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    num_pos = max(float(mask.sum()), 1.0)
    diff = (pred - target) * mask
    return float(np.abs(diff).sum() / num_pos), (np.sign(diff) / num_pos).astype(pred.dtype)


# ------------------------------------------------------------
# Training loop
# ------------------------------------------------------------
def _clip_global_norm(grads: List[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def train(dataset: SceneSet, train_config: TrainConfig, seed: int,
          architecture: Optional[Architecture] = None,
          visual_threshold: float = config.VISUAL_THRESHOLD,
          held_out: Optional[SceneSet] = None) -> DetectorModel:
    """
    SGD with momentum on focal + L1 size loss. Deterministic for a fixed
    (dataset, config, seed). When ``held_out`` is given its clean mAP is
    stored in ``model.metadata["clean_map"]``.
    """
    if len(dataset) == 0:
        raise RejectedInputError("training dataset is empty")
    if train_config.epochs < 1 or train_config.batch_size < 1 or train_config.learning_rate <= 0:
        raise RejectedInputError(f"invalid training configuration: {train_config}")

    rng = np.random.default_rng(seed)
    height, width = dataset[0].image.shape[:2]
    architecture = architecture or default_architecture()
    model = DetectorModel.initialise(architecture, (height, width), rng,
                                     visual_threshold=visual_threshold, seed=seed)
    targets = build_targets(dataset, model.num_categories, model.heatmap_size, model.total_stride)
    images = np.stack(dataset.images).transpose(0, 3, 1, 2).astype(np.float32)

    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    n = len(dataset)
    logging.info("Training %s on %d scenes for %d epochs", model.model_id, n, train_config.epochs)

    for epoch in range(train_config.epochs):
        lr = train_config.learning_rate_at(epoch)
        order = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            tape = ComputationTape(np.float32)
            heads, param_nodes = run_network(model, tape.constant(images[idx]), tape, trainable=True)

            hm_loss, hm_grad = focal_loss(heads.logits.value, targets.heatmaps[idx])
            wh_loss, wh_grad = size_loss(heads.sizes.value, targets.sizes[idx], targets.size_mask[idx])
            loss = hm_loss + train_config.size_weight * wh_loss
            if not math.isfinite(loss):
                logging.error("Loss became %s at epoch %d", loss, epoch + 1)
                raise TrainingFailureError(epoch + 1)

            tape.backward_from({heads.logits: hm_grad, heads.sizes: train_config.size_weight * wh_grad})
            grads = [node.grad for node in param_nodes]
            _clip_global_norm(grads, train_config.grad_clip)
            for p, v, g in zip(params, velocity, grads):
                v *= train_config.momentum
                v += g
                p -= lr * v

            epoch_loss += loss
            batches += 1

        mean_loss = epoch_loss / batches
        if not math.isfinite(mean_loss):
            raise TrainingFailureError(epoch + 1)
        logging.info("Epoch %d/%d lr=%.4g mean loss=%.4f", epoch + 1, train_config.epochs, lr, mean_loss)

    if held_out is not None:
        record_clean_map(model, held_out)
    return model


def record_clean_map(model: DetectorModel, held_out: SceneSet) -> float:
    score = clean_map(model, held_out)
    model.metadata["clean_map"] = score
    model.metadata["clean_map_scenes"] = len(held_out)
    logging.info("Clean mAP of %s on %d held-out scenes: %.4f", model.model_id, len(held_out), score)
    return score


def training_seeds(seeds: Sequence[int]) -> List[int]:
    return sorted(set(int(s) for s in seeds))
