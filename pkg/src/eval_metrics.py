from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import config as config
from errors import RejectedInputError, UndefinedMetricError
from results import AttackResult
from synthetic_scenes import SceneSet
from toy_detector import DetectorModel, detect
from utils import atomic_write_bytes, box_iou, to_json_bytes


# ------------------------------------------------------------
# Average precision
# ------------------------------------------------------------
def average_precision(recall: Sequence[float], precision: Sequence[float]) -> float:
    """All-point interpolated area under the precision/recall curve."""
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _category_ap(detections: Sequence[Sequence[Any]], ground_truth: Sequence[Sequence[Any]], category: int,
                 iou_threshold: float) -> float:
    gt_boxes = [[a.box for a in anns if a.category == category] for anns in ground_truth]
    n_gt = sum(len(b) for b in gt_boxes)
    if n_gt == 0:
        return 0.0

    candidates: List[Tuple[float, float, int, int, int]] = []
    order = 0
    for image, dets in enumerate(detections):
        for det in dets:
            if det.category != category:
                continue
            overlaps = [box_iou(det.box, g) for g in gt_boxes[image]]
            best = int(np.argmax(overlaps)) if overlaps else -1
            best_iou = overlaps[best] if overlaps else 0.0
            candidates.append((-float(det.score), -best_iou, order, image, best))
            order += 1
    if not candidates:
        return 0.0
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))

    matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(candidates))
    for rank, (_, neg_iou, _, image, best) in enumerate(candidates):
        if best >= 0 and -neg_iou >= iou_threshold and not matched[image][best]:
            matched[image][best] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, np.finfo(np.float64).eps)
    return average_precision(recall, precision)


def per_category_ap(detections: Sequence[Sequence[Any]], ground_truth: Sequence[Sequence[Any]],
                    iou_threshold: float = config.IOU_THRESHOLD) -> Dict[int, float]:
    """
    AP per category present in the ground truth. Detections are matched
    greedily in (score desc, IoU desc, input order) order and every ground
    truth box is matched at most once.
    """
    if len(detections) != len(ground_truth):
        raise RejectedInputError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    if not 0.0 < iou_threshold < 1.0:
        raise RejectedInputError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    categories = sorted({a.category for anns in ground_truth for a in anns})
    if not categories:
        raise UndefinedMetricError("mAP is undefined without ground-truth objects")
    return {k: _category_ap(detections, ground_truth, k, iou_threshold) for k in categories}


def mean_average_precision(detections: Sequence[Sequence[Any]], ground_truth: Sequence[Sequence[Any]],
                           iou_threshold: float = config.IOU_THRESHOLD) -> float:
    aps = per_category_ap(detections, ground_truth, iou_threshold)
    return sum(aps[k] for k in sorted(aps)) / len(aps)


# ------------------------------------------------------------
# Attack metrics
# ------------------------------------------------------------
def attack_success_rate(map_clean: float, map_attack: float) -> float:
    if map_clean <= 0:
        raise UndefinedMetricError("ASR is undefined for a clean mAP of 0")
    return max(0.0, 1.0 - map_attack / map_clean)


def attack_transfer_ratio(asr_origin: float, asr_target: float) -> float:
    if asr_origin <= 0:
        raise UndefinedMetricError("ATR is undefined for an origin ASR of 0")
    return asr_target / asr_origin


def perceptibility(r: np.ndarray) -> Tuple[float, float]:
    """(RMS over every value, fraction of spatial pixels with any channel perturbed)."""
    r = np.asarray(r, dtype=np.float64)
    if r.size == 0:
        return 0.0, 0.0
    p_l2 = math.sqrt(float(np.mean(r * r)))
    changed = np.abs(r) > config.PERTURBED_EPS
    spatial = np.any(changed, axis=-1) if r.ndim >= 3 else changed
    return p_l2, float(spatial.mean())


# ------------------------------------------------------------
# Reports
# ------------------------------------------------------------
class CategoryAP(BaseModel):
    model_config = ConfigDict(frozen=True)

    clean: float
    attack: float


class EvalReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    report_schema: str = Field(default=config.REPORT_SCHEMA, alias="schema")
    model_id: str
    method: str
    num_images: int
    map_clean: float
    map_attack: float
    asr: float
    p_l2: float
    p_l0: float
    success_rate: float
    per_category: Dict[str, CategoryAP]
    mean_attack_time_s: Optional[float] = None

    def to_record(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True, exclude_none=True)


class TransferReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    report_schema: str = Field(default=config.REPORT_SCHEMA, alias="schema")
    origin_model: str
    target_model: str
    method: str
    map_clean_target: float
    map_attack_target: float
    asr_origin: float
    asr_target: float
    atr: float

    def to_record(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True, exclude_none=True)


def write_report(report: Union[EvalReport, TransferReport], path: Union[str, Path]) -> None:
    atomic_write_bytes(path, to_json_bytes(report.to_record()))
    logging.info("Wrote %s report to %s", report.report_schema, path)


# ------------------------------------------------------------
# Harness
# ------------------------------------------------------------
def detect_all(model: DetectorModel, images: Sequence[np.ndarray]) -> List[list]:
    return [detect(model, image) for image in images]


def clean_map(model: DetectorModel, scene_set: SceneSet, iou_threshold: float = config.IOU_THRESHOLD) -> float:
    return mean_average_precision(detect_all(model, scene_set.images), scene_set.annotations, iou_threshold)


def _category_name(k: int) -> str:
    return config.CATEGORY_NAMES[k] if k < len(config.CATEGORY_NAMES) else f"category-{k}"


def evaluate_attacks(model: DetectorModel, scene_set: SceneSet, results: Sequence[AttackResult],
                     clean_detections: Optional[Sequence[list]] = None, *,
                     include_timing: bool = False,
                     iou_threshold: float = config.IOU_THRESHOLD) -> EvalReport:
    if len(results) != len(scene_set):
        raise RejectedInputError(f"{len(results)} attack results for {len(scene_set)} scenes")
    annotations = scene_set.annotations
    if clean_detections is None:
        clean_detections = detect_all(model, scene_set.images)
    attack_detections = detect_all(model, [r.adversarial for r in results])

    clean_aps = per_category_ap(clean_detections, annotations, iou_threshold)
    attack_aps = per_category_ap(attack_detections, annotations, iou_threshold)
    map_clean = sum(clean_aps[k] for k in sorted(clean_aps)) / len(clean_aps)
    map_attack = sum(attack_aps[k] for k in sorted(attack_aps)) / len(attack_aps)

    successful = [r for r in results if r.success] or list(results)
    methods = sorted({r.method for r in results})
    report = EvalReport(
        model_id=model.model_id,
        method="+".join(methods) if methods else "none",
        num_images=len(results),
        map_clean=map_clean,
        map_attack=map_attack,
        asr=attack_success_rate(map_clean, map_attack),
        p_l2=sum(r.p_l2 for r in successful) / len(successful) if successful else 0.0,
        p_l0=sum(r.p_l0 for r in successful) / len(successful) if successful else 0.0,
        success_rate=sum(1 for r in results if r.success) / len(results) if results else 0.0,
        per_category={_category_name(k): CategoryAP(clean=clean_aps[k], attack=attack_aps[k])
                      for k in sorted(clean_aps)},
        mean_attack_time_s=(sum(r.elapsed_s for r in results) / len(results)) if include_timing and results else None,
    )
    logging.info("Eval %s/%s: mAP %.4f -> %.4f, ASR %.4f", report.model_id, report.method,
                 map_clean, map_attack, report.asr)
    return report


def transfer_eval(adversarial_images: Sequence[np.ndarray], scene_set: SceneSet, origin_model: DetectorModel,
                  target_model: DetectorModel, clean_maps: Optional[Dict[str, float]] = None, *,
                  origin_asr: Optional[float] = None, method: str = "unknown",
                  iou_threshold: float = config.IOU_THRESHOLD) -> TransferReport:
    """
    Black-box transfer: mAP of ``target_model`` on the set crafted against
    ``origin_model``. ``clean_maps`` maps model ids to known clean mAPs;
    ``origin_asr`` may carry the white-box ASR from the attack run.
    """
    if len(adversarial_images) != len(scene_set):
        raise RejectedInputError(f"{len(adversarial_images)} adversarial images for {len(scene_set)} scenes")
    clean_maps = dict(clean_maps or {})
    annotations = scene_set.annotations

    def known_clean_map(model: DetectorModel) -> float:
        if model.model_id not in clean_maps:
            clean_maps[model.model_id] = clean_map(model, scene_set, iou_threshold)
        return clean_maps[model.model_id]

    if origin_asr is None:
        origin_attack = mean_average_precision(detect_all(origin_model, adversarial_images), annotations, iou_threshold)
        origin_asr = attack_success_rate(known_clean_map(origin_model), origin_attack)

    map_clean_target = known_clean_map(target_model)
    map_attack_target = mean_average_precision(detect_all(target_model, adversarial_images), annotations,
                                               iou_threshold)
    asr_target = attack_success_rate(map_clean_target, map_attack_target)
    report = TransferReport(
        origin_model=origin_model.model_id,
        target_model=target_model.model_id,
        method=method,
        map_clean_target=map_clean_target,
        map_attack_target=map_attack_target,
        asr_origin=origin_asr,
        asr_target=asr_target,
        atr=attack_transfer_ratio(origin_asr, asr_target),
    )
    logging.info("Transfer %s -> %s: ASR %.4f / %.4f, ATR %.4f", report.origin_model, report.target_model,
                 origin_asr, asr_target, report.atr)
    return report
