from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config as config
from attack_dca import dca_attack
from attack_report import AttackReport
from attack_sca import sca_attack
from errors import ArtifactMissingError
from eval_metrics import (
    EvalReport,
    TransferReport,
    attack_success_rate,
    detect_all,
    evaluate_attacks,
    mean_average_precision,
    transfer_eval,
    write_report,
)
from results import AttackResult, summary_frame, telemetry_frame
from run_config import RunConfig
from synthetic_scenes import SceneSet, generate, read_scene_set, write_ppm, write_scene_set
from tensor_autodiff import load_tensor, save_tensor
from toy_detector import DetectorModel, default_architecture, detect, load_model, save_model
from training import train, training_seeds
from utils import append_run_record, atomic_write_json, read_json


@dataclass(frozen=True)
class RunLayout:
    """Artifact locations under one output directory."""
    root: Path

    def data_dir(self, split: str) -> Path:
        return self.root / "data" / split

    def model_path(self, seed: int) -> Path:
        return self.root / "models" / f"detector-seed{seed}.cwm"

    def attack_dir(self, method: str, model_id: str, detected_only: bool = False) -> Path:
        suffix = "-detected-only" if detected_only else ""
        return self.root / "attacks" / f"{method}-{model_id}{suffix}"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def detections_dir(self) -> Path:
        return self.root / "detections"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        logging.error("%s not found: %s", what, path)
        raise ArtifactMissingError(f"{what} not found: {path}")
    return path


def _seeds(cfg: RunConfig) -> Dict[str, object]:
    return {
        "train_data": cfg.dataset.train_seed,
        "test_data": cfg.dataset.test_seed,
        "training": list(cfg.train.seeds),
    }


# ------------------------------------------------------------
# gen-data / train / detect
# ------------------------------------------------------------
def gen_data_entry(cfg: RunConfig) -> Tuple[Path, Path]:
    layout = RunLayout(cfg.output_dir)
    d = cfg.dataset
    train_dir = write_scene_set(
        generate(d.train_count, d.train_seed, d.image_size, cfg.detector.num_categories), layout.data_dir("train"))
    test_dir = write_scene_set(
        generate(d.test_count, d.test_seed, d.image_size, cfg.detector.num_categories), layout.data_dir("test"))
    append_run_record(cfg.output_dir, "gen-data", cfg.payload(), _seeds(cfg))
    return train_dir, test_dir


def train_entry(cfg: RunConfig, seeds: Optional[Sequence[int]] = None,
                data_dir: Optional[Path] = None) -> List[Path]:
    layout = RunLayout(cfg.output_dir)
    train_set = read_scene_set(_require(Path(data_dir or layout.data_dir("train")), "training data"))
    test_dir = layout.data_dir("test")
    held_out = read_scene_set(test_dir) if (test_dir / "manifest.json").exists() else None
    architecture = default_architecture(cfg.detector.num_categories, cfg.detector.hidden_widths,
                                        dilations=cfg.detector.dilations)

    seeds = training_seeds(seeds if seeds is not None else cfg.train.seeds)
    paths = []
    for seed in seeds:
        model = train(train_set, cfg.train_config(), seed, architecture=architecture,
                      visual_threshold=cfg.detector.visual_threshold, held_out=held_out)
        path = layout.model_path(seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, path)
        paths.append(path)
    append_run_record(cfg.output_dir, "train", cfg.payload(), {**_seeds(cfg), "training": seeds})
    return paths


def detect_entry(cfg: RunConfig, model_path: Path, data_dir: Optional[Path] = None) -> Path:
    layout = RunLayout(cfg.output_dir)
    model = load_model(_require(Path(model_path), "model file"))
    scenes = read_scene_set(_require(Path(data_dir or layout.data_dir("test")), "dataset"))
    detections = _parallel(cfg.workers, lambda i: detect(model, scenes[i].image), len(scenes))

    path = layout.detections_dir / f"{model.model_id}.json"
    atomic_write_json(path, {
        "model_id": model.model_id,
        "images": [{"index": i, "detections": [d.to_record() for d in dets]} for i, dets in enumerate(detections)],
        "map": mean_average_precision(detections, scenes.annotations, cfg.eval.iou_threshold),
    })
    append_run_record(cfg.output_dir, "detect", cfg.payload(), _seeds(cfg))
    return path


# ------------------------------------------------------------
# attack
# ------------------------------------------------------------
def _parallel(workers: int, job, count: int) -> list:
    """Run job(i) for i in range(count) on a thread pool; results come back in index order."""
    if workers <= 1 or count <= 1:
        return [job(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="cw") as pool:
        futures = {i: pool.submit(job, i) for i in range(count)}
        return [futures[i].result() for i in range(count)]


def attack_images(cfg: RunConfig, model: DetectorModel, scenes: SceneSet, method: str,
                  detected_only: bool = False) -> List[AttackResult]:
    budget = cfg.budget()
    attack = sca_attack if method == "sca" else dca_attack

    def job(index: int) -> AttackResult:
        result = attack(model, scenes[index].image, budget, cfg.attack.t_attack, detected_only=detected_only)
        logging.info("%s image %05d: success=%s L0=%.4f L2=%.5f", method.upper(), index, result.success,
                     result.p_l0, result.p_l2)
        return result

    return _parallel(cfg.workers, job, len(scenes))


def attack_entry(cfg: RunConfig, model_path: Path, data_dir: Optional[Path] = None,
                 method: Optional[str] = None, detected_only: Optional[bool] = None) -> Path:
    layout = RunLayout(cfg.output_dir)
    method = method or cfg.attack.method
    detected_only = cfg.attack.detected_only if detected_only is None else detected_only
    model = load_model(_require(Path(model_path), "model file"))
    scenes = read_scene_set(_require(Path(data_dir or layout.data_dir("test")), "dataset"))
    if cfg.attack.limit is not None:
        scenes = SceneSet(scenes.scenes[:cfg.attack.limit], scenes.seed)

    logging.info("Attacking %d images of %s with %s", len(scenes), model.model_id, method.upper())
    results = attack_images(cfg, model, scenes, method, detected_only)

    out = layout.attack_dir(method, model.model_id, detected_only)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for index, result in enumerate(results):
        write_ppm(out / f"{index:05d}.ppm", result.adversarial)
        save_tensor(out / f"{index:05d}.cwt", result.perturbation)
        record = {"index": index, **result.to_record(include_timing=cfg.eval.timing)}
        atomic_write_json(out / f"{index:05d}.json", record)
        records.append(record)

    clean = detect_all(model, scenes.images)
    adversarial = detect_all(model, [r.adversarial for r in results])
    map_clean = mean_average_precision(clean, scenes.annotations, cfg.eval.iou_threshold)
    map_attack = mean_average_precision(adversarial, scenes.annotations, cfg.eval.iou_threshold)
    atomic_write_json(out / "telemetry.json", {
        "method": method,
        "model_id": model.model_id,
        "model_path": str(model_path),
        "data_dir": str(data_dir or layout.data_dir("test")),
        "count": len(results),
        "t_attack": results[0].t_attack if results else cfg.attack.t_attack,
        "detected_only": detected_only,
        "budget": cfg.budget().to_dict(),
        "map_clean": map_clean,
        "map_attack": map_attack,
        "asr": attack_success_rate(map_clean, map_attack) if map_clean > 0 else None,
        "records": records,
    })
    append_run_record(cfg.output_dir, "attack", cfg.payload(), _seeds(cfg))
    return out


def load_attack_run(attack_dir: Path) -> Tuple[dict, SceneSet, List[AttackResult]]:
    """
    Re-read an attack directory. Adversarial images are rebuilt as clean +
    stored perturbation, because 8-bit PPM would round away sub-quantum
    DCA steps.
    """
    manifest = read_json(_require(Path(attack_dir) / "telemetry.json", "attack telemetry"))
    scenes = read_scene_set(_require(Path(manifest["data_dir"]), "dataset"))
    scenes = SceneSet(scenes.scenes[:manifest["count"]], scenes.seed)
    results = []
    for record in manifest["records"]:
        index = record["index"]
        perturbation = load_tensor(_require(Path(attack_dir) / f"{index:05d}.cwt", "perturbation")).astype(np.float64)
        adversarial = np.clip(scenes[index].image.astype(np.float64) + perturbation, 0.0, 1.0)
        results.append(AttackResult.from_record(record, adversarial, perturbation))
    return manifest, scenes, results


# ------------------------------------------------------------
# eval / transfer
# ------------------------------------------------------------
def eval_entry(cfg: RunConfig, attack_dir: Path, model_path: Optional[Path] = None,
               html: bool = False) -> Tuple[EvalReport, Path]:
    layout = RunLayout(cfg.output_dir)
    manifest, scenes, results = load_attack_run(Path(attack_dir))
    model = load_model(_require(Path(model_path or manifest["model_path"]), "model file"))
    report = evaluate_attacks(model, scenes, results, include_timing=cfg.eval.timing,
                              iou_threshold=cfg.eval.iou_threshold)

    name = Path(attack_dir).name
    path = layout.reports_dir / f"eval-{name}.json"
    write_report(report, path)
    if html:
        render_html_report(report, manifest, path.with_suffix(".html"))
    append_run_record(cfg.output_dir, "eval", cfg.payload(), _seeds(cfg))
    return report, path


def render_html_report(report: EvalReport, manifest: dict, path: Path) -> Path:
    records = manifest["records"]
    html_report = AttackReport(
        version=config.VERSION,
        run_info={
            "model": report.model_id,
            "method": report.method,
            "images": str(report.num_images),
            "t_attack": str(manifest.get("t_attack")),
            "ASR": f"{report.asr:.4f}",
        },
    )
    html_report.add_default_figures(report, summary_frame(records), telemetry_frame(records))
    html_report.render(path)
    return path


def transfer_entry(cfg: RunConfig, attack_dir: Path, target_models: Sequence[Path],
                   origin_model: Optional[Path] = None) -> List[Tuple[TransferReport, Path]]:
    layout = RunLayout(cfg.output_dir)
    manifest, scenes, results = load_attack_run(Path(attack_dir))
    origin = load_model(_require(Path(origin_model or manifest["model_path"]), "model file"))
    adversarial = [r.adversarial for r in results]
    clean_maps = {origin.model_id: manifest["map_clean"]}

    reports = []
    for target_path in target_models:
        target = load_model(_require(Path(target_path), "model file"))
        report = transfer_eval(adversarial, scenes, origin, target, clean_maps,
                               origin_asr=manifest.get("asr"), method=manifest["method"],
                               iou_threshold=cfg.eval.iou_threshold)
        path = layout.reports_dir / f"transfer-{Path(attack_dir).name}-to-{target.model_id}.json"
        write_report(report, path)
        reports.append((report, path))
    append_run_record(cfg.output_dir, "transfer", cfg.payload(), _seeds(cfg))
    return reports
