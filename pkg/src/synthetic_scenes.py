from __future__ import annotations

import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

import config as config
from errors import ArtifactMissingError, RejectedInputError
from utils import atomic_write_bytes, atomic_write_json, box_iou, read_json

BoxTuple = Tuple[float, float, float, float]


@dataclass(frozen=True)
class Annotation:
    category: int
    box: BoxTuple  # cx, cy, w, h in input pixels

    def to_record(self) -> Dict:
        return {"category": self.category, "box": [float(v) for v in self.box]}


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3, float32 in [0, 1], multiples of 1/255
    annotations: List[Annotation] = field(default_factory=list)


@dataclass
class SceneSet:
    scenes: List[Scene]
    seed: int

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self) -> Iterator[Scene]:
        return iter(self.scenes)

    def __getitem__(self, index: int) -> Scene:
        return self.scenes[index]

    @property
    def images(self) -> List[np.ndarray]:
        return [s.image for s in self.scenes]

    @property
    def annotations(self) -> List[List[Annotation]]:
        return [s.annotations for s in self.scenes]


# ------------------------------------------------------------
# Rendering
# ------------------------------------------------------------
def value_noise(rng: np.random.Generator, size: int, grid: int = config.NOISE_GRID) -> np.ndarray:
    """Smooth noise in [-1, 1], one bilinear-upsampled lattice per channel."""
    channels = []
    for _ in range(3):
        lattice = rng.uniform(-1.0, 1.0, (grid + 1, grid + 1)).astype(np.float32)
        up = Image.fromarray(lattice).resize((size, size), Image.BILINEAR)
        channels.append(np.asarray(up, dtype=np.float32))
    return np.clip(np.stack(channels, axis=-1), -1.0, 1.0)


def shape_mask(category: int, box: BoxTuple, size: int) -> np.ndarray:
    cx, cy, w, h = box
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    name = config.CATEGORY_NAMES[category]
    if name == "circle":
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=255)
    elif name == "square":
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=255)
    else:
        draw.polygon([(cx, y1), (x1, y2 - 1), (x2 - 1, y2 - 1)], fill=255)
    return np.asarray(canvas, dtype=np.float32) / 255.0


def _contrasting_color(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    margin = config.MIN_CONTRAST + config.NOISE_AMPLITUDE + 0.01
    while True:
        color = rng.uniform(0.0, 1.0, 3)
        if np.max(np.abs(color - base)) >= margin:
            return color


def _place_boxes(rng: np.random.Generator, count: int, size: int) -> List[BoxTuple]:
    boxes: List[BoxTuple] = []
    for _ in range(count):
        for _attempt in range(100):
            side = int(rng.integers(config.MIN_BOX + 2, config.MAX_BOX - 1))
            x1, y1 = (int(v) for v in rng.integers(0, size - side + 1, 2))
            box = (x1 + side / 2, y1 + side / 2, float(side), float(side))
            if all(box_iou(box, other) <= config.MAX_PAIR_IOU for other in boxes):
                boxes.append(box)
                break
    return boxes


def generate_scene(seed: int, index: int, size: int = config.INPUT_SIZE,
                   num_categories: int = config.NUM_CATEGORIES) -> Scene:
    """Scene ``index`` of the set generated from ``seed``; independent of every other index."""
    rng = np.random.default_rng([seed, index])
    base = rng.uniform(0.25, 0.75, 3)
    image = np.clip(base + config.NOISE_AMPLITUDE * value_noise(rng, size), 0.0, 1.0)

    n_objects = int(rng.integers(config.MIN_OBJECTS, config.MAX_OBJECTS + 1))
    annotations = []
    for box in _place_boxes(rng, n_objects, size):
        category = int(rng.integers(num_categories))
        mask = shape_mask(category, box, size)[..., None]
        color = _contrasting_color(rng, base)
        image = image * (1.0 - mask) + color * mask
        annotations.append(Annotation(category, box))

    image = (np.round(image * 255.0) / 255.0).astype(np.float32)
    return Scene(image=image, annotations=annotations)


def generate(count: int, seed: int, size: int = config.INPUT_SIZE,
             num_categories: int = config.NUM_CATEGORIES) -> SceneSet:
    if count < 1:
        raise RejectedInputError(f"scene count must be >= 1, got {count}")
    scenes = [generate_scene(seed, i, size, num_categories) for i in range(count)]
    logging.info("Generated %d synthetic scenes (seed=%d, %d objects)", count, seed,
                 sum(len(s.annotations) for s in scenes))
    return SceneSet(scenes=scenes, seed=seed)


def category_histogram(scene_set: SceneSet) -> Dict[int, int]:
    counts = Counter(a.category for scene in scene_set for a in scene.annotations)
    return dict(sorted(counts.items()))


# ------------------------------------------------------------
# PPM / dataset directory
# ------------------------------------------------------------
def image_to_ppm_bytes(image: np.ndarray) -> bytes:
    pixels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PPM")
    return buffer.getvalue()


def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    atomic_write_bytes(path, image_to_ppm_bytes(image))


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_scene_set(scene_set: SceneSet, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scene_set):
        write_ppm(directory / f"{i:05d}.ppm", scene.image)
        atomic_write_json(directory / f"{i:05d}.json",
                          {"annotations": [a.to_record() for a in scene.annotations]})
    atomic_write_json(directory / "manifest.json", {
        "seed": scene_set.seed,
        "count": len(scene_set),
        "categories": list(config.CATEGORY_NAMES),
    })
    logging.info("Wrote %d scenes to %s", len(scene_set), directory)
    return directory


def read_annotations(path: Union[str, Path]) -> List[Annotation]:
    return [Annotation(int(a["category"]), tuple(float(v) for v in a["box"]))
            for a in read_json(path)["annotations"]]


def read_scene_set(directory: Union[str, Path]) -> SceneSet:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactMissingError(f"dataset manifest not found: {manifest_path}")
    manifest = read_json(manifest_path)

    scenes = []
    for i in range(int(manifest["count"])):
        image_path, annotation_path = directory / f"{i:05d}.ppm", directory / f"{i:05d}.json"
        if not image_path.exists() or not annotation_path.exists():
            raise ArtifactMissingError(f"scene {i:05d} missing in {directory}")
        scenes.append(Scene(read_ppm(image_path), read_annotations(annotation_path)))
    return SceneSet(scenes=scenes, seed=int(manifest["seed"]))

