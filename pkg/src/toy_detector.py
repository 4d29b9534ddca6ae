from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config as config
from errors import RejectedInputError
from losses import HeadNodes, ScalarLossSpec
from tensor_autodiff import (
    ComputationTape,
    Node,
    decode_tensor,
    encode_tensor,
    max_pool3x3_forward,
)
from utils import atomic_write_bytes

MODEL_FORMAT = "cwmodel/1"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    relu: bool = True
    dilation: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "relu": self.relu,
            "dilation": self.dilation,
        }


@dataclass
class ConvLayer:
    spec: ConvSpec
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class DetectorModel:
    """
    Toy CenterNet-style detector: a conv3x3-relu trunk with one stride-2
    layer and dilated later layers, then 1x1 heads for K heatmap logits and 2 size channels (w, h in
    input pixels).
    """
    trunk: List[ConvLayer]
    heatmap_head: ConvLayer
    size_head: ConvLayer
    input_size: Tuple[int, int]
    visual_threshold: float = config.VISUAL_THRESHOLD
    seed: Optional[int] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 < self.visual_threshold < 1.0:
            raise RejectedInputError(f"visual_threshold must lie in (0, 1), got {self.visual_threshold}")
        h, w = self.heatmap_size
        if h <= 0 or w <= 0:
            raise RejectedInputError(f"input {self.input_size} too small for the architecture")

    @property
    def num_categories(self) -> int:
        return self.heatmap_head.spec.out_channels

    @property
    def in_channels(self) -> int:
        layers = self.trunk or [self.heatmap_head]
        return layers[0].spec.in_channels

    @property
    def total_stride(self) -> int:
        stride = 1
        for layer in self.trunk:
            stride *= layer.spec.stride
        return stride * self.heatmap_head.spec.stride

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        h, w = self.input_size
        for spec in [layer.spec for layer in self.trunk] + [self.heatmap_head.spec]:
            span = spec.dilation * (spec.kernel - 1) + 1
            h = (h + 2 * spec.padding - span) // spec.stride + 1
            w = (w + 2 * spec.padding - span) // spec.stride + 1
        return h, w

    @property
    def model_id(self) -> str:
        return self.metadata.get("model_id") or (f"seed-{self.seed}" if self.seed is not None else "detector")

    def layers(self) -> List[ConvLayer]:
        return [*self.trunk, self.heatmap_head, self.size_head]

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for layer in self.layers():
            params.extend([layer.weight, layer.bias])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "DetectorModel":
        it = iter(params)
        layers = [ConvLayer(layer.spec, next(it), next(it)) for layer in self.layers()]
        return replace(self, trunk=layers[:-2], heatmap_head=layers[-2], size_head=layers[-1],
                       metadata=dict(self.metadata))

    @classmethod
    def zeros(cls, specs: "Architecture", input_size: Tuple[int, int], **kwargs: Any) -> "DetectorModel":
        layers = [ConvLayer(s, np.zeros((s.out_channels, s.in_channels, s.kernel, s.kernel), np.float32),
                            np.zeros(s.out_channels, np.float32)) for s in specs.all_specs()]
        return cls(trunk=layers[:-2], heatmap_head=layers[-2], size_head=layers[-1],
                   input_size=input_size, **kwargs)

    @classmethod
    def initialise(cls, specs: "Architecture", input_size: Tuple[int, int], rng: np.random.Generator,
                   **kwargs: Any) -> "DetectorModel":
        model = cls.zeros(specs, input_size, **kwargs)
        for layer in model.layers():
            s = layer.spec
            fan_in = s.in_channels * s.kernel * s.kernel
            layer.weight[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), layer.weight.shape)
        model.heatmap_head.weight *= 0.1
        model.heatmap_head.bias[...] = config.HEATMAP_BIAS_INIT
        model.size_head.weight *= 0.1
        model.size_head.bias[...] = config.SIZE_BIAS_INIT
        return model


@dataclass(frozen=True)
class Architecture:
    trunk: Tuple[ConvSpec, ...]
    heatmap_head: ConvSpec
    size_head: ConvSpec

    def all_specs(self) -> List[ConvSpec]:
        return [*self.trunk, self.heatmap_head, self.size_head]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trunk": [s.to_dict() for s in self.trunk],
            "heatmap_head": self.heatmap_head.to_dict(),
            "size_head": self.size_head.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Architecture":
        return cls(
            trunk=tuple(ConvSpec(**s) for s in payload["trunk"]),
            heatmap_head=ConvSpec(**payload["heatmap_head"]),
            size_head=ConvSpec(**payload["size_head"]),
        )


def default_architecture(
    num_categories: int = config.NUM_CATEGORIES,
    widths: Sequence[int] = config.HIDDEN_WIDTHS,
    downsample_layer: int = config.DOWNSAMPLE_LAYER,
    in_channels: int = 3,
    dilations: Sequence[int] = config.LAYER_DILATIONS,
) -> Architecture:
    """Layers past the end of ``dilations`` are undilated; padding keeps each layer size-preserving."""
    trunk = []
    previous = in_channels
    for index, width in enumerate(widths):
        stride = 2 if index == downsample_layer else 1
        dilation = dilations[index] if index < len(dilations) else 1
        trunk.append(ConvSpec(previous, width, kernel=3, stride=stride, padding=dilation, relu=True,
                              dilation=dilation))
        previous = width
    return Architecture(
        trunk=tuple(trunk),
        heatmap_head=ConvSpec(previous, num_categories, kernel=1, stride=1, padding=0, relu=False),
        size_head=ConvSpec(previous, 2, kernel=1, stride=1, padding=0, relu=False),
    )


def architecture_of(model: DetectorModel) -> Architecture:
    return Architecture(
        trunk=tuple(layer.spec for layer in model.trunk),
        heatmap_head=model.heatmap_head.spec,
        size_head=model.size_head.spec,
    )


# ------------------------------------------------------------
# Forward / gradients
# ------------------------------------------------------------
@dataclass
class DetectorOutput:
    logits: np.ndarray         # K x h x w
    probabilities: np.ndarray  # K x h x w, sigmoid(logits)
    sizes: np.ndarray          # 2 x h x w, (w, h) in input pixels
    stride: int
    tape: Optional[ComputationTape] = field(default=None, repr=False, compare=False)

    @property
    def num_categories(self) -> int:
        return self.logits.shape[0]

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        return self.logits.shape[1], self.logits.shape[2]


def _check_image(model: DetectorModel, image: np.ndarray) -> None:
    expected = (*model.input_size, model.in_channels)
    if image.shape != expected:
        raise RejectedInputError(f"image shape {image.shape} does not match model input {expected}")
    if not np.all(np.isfinite(image)):
        raise RejectedInputError("image contains non-finite values")


def run_network(
    model: DetectorModel,
    batch: Node,
    tape: ComputationTape,
    trainable: bool = False,
) -> Tuple[HeadNodes, List[Node]]:
    """Record the detector on ``tape`` for an NCHW batch node; returns head nodes and parameter nodes."""
    leaf = tape.variable if trainable else tape.constant
    params: List[Node] = []

    def conv(x: Node, layer: ConvLayer) -> Node:
        w, b = leaf(layer.weight, name="weight"), leaf(layer.bias, name="bias")
        params.extend([w, b])
        out = tape.conv2d(x, w, b, stride=layer.spec.stride, padding=layer.spec.padding,
                          dilation=layer.spec.dilation)
        return tape.relu(out) if layer.spec.relu else out

    features = batch
    for layer in model.trunk:
        features = conv(features, layer)
    logits = conv(features, model.heatmap_head)
    sizes = conv(features, model.size_head)
    return HeadNodes(logits, tape.sigmoid(logits), sizes), params


def _record_image(model: DetectorModel, image: np.ndarray, dtype: Any, requires_grad: bool
                  ) -> Tuple[ComputationTape, Node, HeadNodes]:
    _check_image(model, image)
    tape = ComputationTape(dtype=dtype)
    chw = np.asarray(image, dtype=dtype).transpose(2, 0, 1)[None]
    x = tape.variable(chw, name="image") if requires_grad else tape.constant(chw, name="image")
    heads, _ = run_network(model, x, tape)
    return tape, x, heads


def forward(model: DetectorModel, image: np.ndarray, *, dtype: Any = np.float32) -> DetectorOutput:
    """Run the detector on one HxWx3 image in [0, 1]."""
    tape, _, heads = _record_image(model, image, dtype, requires_grad=False)
    return DetectorOutput(
        logits=heads.logits.value[0],
        probabilities=heads.probabilities.value[0],
        sizes=heads.sizes.value[0],
        stride=model.total_stride,
        tape=tape,
    )


def loss_and_grad(model: DetectorModel, image: np.ndarray, loss: ScalarLossSpec, *,
                  dtype: Any = np.float32) -> Tuple[float, np.ndarray]:
    """Scalar loss value and dLoss/dImage (HxWx3) from one forward/backward pass."""
    tape, x, heads = _record_image(model, image, dtype, requires_grad=True)
    value = loss.record(tape, heads)
    tape.backward(value)
    grad = x.grad if x.grad is not None else np.zeros_like(x.value)
    return float(value.value), grad[0].transpose(1, 2, 0)


def grad_wrt_input(model: DetectorModel, image: np.ndarray, loss: ScalarLossSpec, *,
                   dtype: Any = np.float32) -> np.ndarray:
    return loss_and_grad(model, image, loss, dtype=dtype)[1]


def evaluate_loss(model: DetectorModel, image: np.ndarray, loss: ScalarLossSpec, *,
                  dtype: Any = np.float32) -> float:
    tape, _, heads = _record_image(model, image, dtype, requires_grad=False)
    return float(loss.record(tape, heads).value)


# ------------------------------------------------------------
# Decoding
# ------------------------------------------------------------
@dataclass(frozen=True)
class Detection:
    category: int
    score: float
    box: Tuple[float, float, float, float]  # cx, cy, w, h in input pixels
    keypoint: Tuple[int, int]

    def to_record(self) -> Dict[str, Any]:
        return {"category": self.category, "score": self.score, "box": list(self.box)}


def local_peaks(heatmap: np.ndarray) -> np.ndarray:
    """
    Boolean mask of cells that are the maximum of their 3x3 neighbourhood.

    Among equal values inside a window the cell with the smaller (row, col)
    wins, so a plateau yields exactly one peak per window.
    """
    pooled, _ = max_pool3x3_forward(heatmap)
    mask = heatmap >= pooled
    padded = np.pad(heatmap, [(0, 0)] * (heatmap.ndim - 2) + [(1, 1), (1, 1)], constant_values=-np.inf)
    h, w = heatmap.shape[-2], heatmap.shape[-1]
    for di, dj in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
        earlier = padded[..., 1 + di:1 + di + h, 1 + dj:1 + dj + w]
        mask &= heatmap > earlier
    return mask


def decode(output: DetectorOutput, visual_threshold: float, image_size: Optional[Tuple[int, int]] = None
           ) -> List[Detection]:
    """Keypoints are 3x3 local maxima with probability >= visual_threshold."""
    probs = output.probabilities
    height, width = image_size or (probs.shape[1] * output.stride, probs.shape[2] * output.stride)
    mask = local_peaks(probs) & (probs >= visual_threshold)

    detections: List[Detection] = []
    for k, r, c in zip(*np.nonzero(mask)):
        bw, bh = (float(max(v, 0.0)) for v in output.sizes[:, r, c])
        cx, cy = (c + 0.5) * output.stride, (r + 0.5) * output.stride
        x1, x2 = max(0.0, cx - bw / 2), min(float(width), cx + bw / 2)
        y1, y2 = max(0.0, cy - bh / 2), min(float(height), cy + bh / 2)
        detections.append(Detection(
            category=int(k),
            score=float(probs[k, r, c]),
            box=((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1),
            keypoint=(int(r), int(c)),
        ))
    detections.sort(key=lambda d: (-d.score, d.category, d.keypoint))
    return detections


def detect(model: DetectorModel, image: np.ndarray) -> List[Detection]:
    return decode(forward(model, image), model.visual_threshold, model.input_size)


# ------------------------------------------------------------
# Model file
# ------------------------------------------------------------
def save_model(model: DetectorModel, path: Union[str, Path]) -> None:
    """u32 header length, UTF-8 JSON header, then CWT1 parameter records in layer order."""
    header = json.dumps({
        "format": MODEL_FORMAT,
        "architecture": architecture_of(model).to_dict(),
        "num_categories": model.num_categories,
        "input_size": list(model.input_size),
        "visual_threshold": model.visual_threshold,
        "seed": model.seed,
        "metadata": model.metadata,
    }, sort_keys=True).encode("utf-8")
    payload = b"".join(encode_tensor(p) for p in model.parameters())
    atomic_write_bytes(path, struct.pack("<I", len(header)) + header + payload)
    logging.info("Saved model %s to %s", model.model_id, path)


def load_model(path: Union[str, Path]) -> DetectorModel:
    buffer = Path(path).read_bytes()
    (length,) = struct.unpack_from("<I", buffer, 0)
    header = json.loads(buffer[4:4 + length].decode("utf-8"))
    if header.get("format") != MODEL_FORMAT:
        raise RejectedInputError(f"{path}: unsupported model format {header.get('format')!r}")

    model = DetectorModel.zeros(
        Architecture.from_dict(header["architecture"]),
        tuple(header["input_size"]),
        visual_threshold=header["visual_threshold"],
        seed=header["seed"],
        metadata=header.get("metadata", {}),
    )
    offset = 4 + length
    params = []
    for expected in model.parameters():
        array, offset = decode_tensor(buffer, offset)
        if array.shape != expected.shape:
            raise RejectedInputError(f"{path}: parameter shape {array.shape} != {expected.shape}")
        params.append(array)
    if offset != len(buffer):
        raise RejectedInputError(f"{path}: trailing bytes after parameters")
    return model.with_parameters(params)
