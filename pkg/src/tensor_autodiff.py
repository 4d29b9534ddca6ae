from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractViolationError, RejectedInputError
from utils import atomic_write_bytes

CWT_MAGIC = b"CWT1"

Pixel = Tuple[int, int]


# ------------------------------------------------------------
# CWT1 binary codec
# ------------------------------------------------------------
def encode_tensor(array: np.ndarray) -> bytes:
    """
    Serialise an array as a CWT1 record.

    Layout: magic "CWT1", u8 rank, little-endian u32 dims, little-endian
    float32 payload (row-major), no padding.
    """
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise RejectedInputError(f"rank {arr.ndim} does not fit the CWT1 header")
    if any(d <= 0 for d in arr.shape):
        raise RejectedInputError(f"CWT1 dims must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RejectedInputError("CWT1 payload must be finite")

    header = CWT_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one CWT1 record starting at ``offset``; returns (array, next offset)."""
    if buffer[offset:offset + 4] != CWT_MAGIC:
        raise RejectedInputError("not a CWT1 tensor (bad magic)")
    offset += 4
    (rank,) = struct.unpack_from("<B", buffer, offset)
    offset += 1
    dims = struct.unpack_from(f"<{rank}I", buffer, offset)
    offset += 4 * rank

    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buffer) < offset + 4 * count:
        raise RejectedInputError("truncated CWT1 payload")
    data = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset)
    offset += 4 * count
    return data.astype(np.float32).reshape(dims), offset


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    buffer = Path(path).read_bytes()
    array, end = decode_tensor(buffer)
    if end != len(buffer):
        raise RejectedInputError(f"{path}: trailing bytes after CWT1 record")
    return array


# ------------------------------------------------------------
# Kernels (pure functions over numpy arrays)
# ------------------------------------------------------------
def _window(kernel_offset: int, stride: int, out_size: int) -> slice:
    return slice(kernel_offset, kernel_offset + stride * (out_size - 1) + 1, stride)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int,
                   dilation: int = 1) -> np.ndarray:
    """Direct 2-D convolution, NCHW input, OCkk weights; taps are ``dilation`` pixels apart."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    _, _, hp, wp = xp.shape
    _, _, kh, kw = w.shape
    ho = (hp - dilation * (kh - 1) - 1) // stride + 1
    wo = (wp - dilation * (kw - 1) - 1) // stride + 1

    out = np.zeros((x.shape[0], ho, wo, w.shape[0]), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, _window(i * dilation, stride, ho), _window(j * dilation, stride, wo)]
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    return out + b[None, :, None, None]


def conv2d_backward(
    g: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int,
    padding: int,
    needs: Tuple[bool, bool, bool],
    dilation: int = 1,
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    _, _, hp, wp = xp.shape
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]

    dxp = np.zeros_like(xp) if needs[0] else None
    dw = np.zeros_like(w) if needs[1] else None
    for i in range(kh):
        for j in range(kw):
            rows, cols = _window(i * dilation, stride, ho), _window(j * dilation, stride, wo)
            if dxp is not None:
                dxp[:, :, rows, cols] += np.tensordot(w[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            if dw is not None:
                dw[:, :, i, j] = np.tensordot(g, xp[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))

    dx = None
    if dxp is not None:
        dx = dxp[:, :, padding:hp - padding, padding:wp - padding]
    db = g.sum(axis=(0, 2, 3)) if needs[2] else None
    return dx, dw, db


def max_pool3x3_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    3x3 window, stride 1, -inf padding over the last two axes.

    Returns the pooled map and the flat in-window argmax (row-major, so ties go
    to the smaller (row, col) offset).
    """
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, constant_values=-np.inf)
    windows = sliding_window_view(xp, (3, 3), axis=(-2, -1))
    flat = windows.reshape(*windows.shape[:-2], 9)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def max_pool3x3_backward(g: np.ndarray, arg: np.ndarray) -> np.ndarray:
    h, w = g.shape[-2], g.shape[-1]
    pad = [(0, 0)] * (g.ndim - 2) + [(1, 1), (1, 1)]
    dxp = np.pad(np.zeros_like(g), pad)
    for k in range(9):
        di, dj = divmod(k, 3)
        dxp[..., di:di + h, dj:dj + w] += np.where(arg == k, g, 0)
    return dxp[..., 1:h + 1, 1:w + 1]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _pixel_index(pixels: Sequence[Pixel]) -> Tuple[np.ndarray, np.ndarray]:
    if len(pixels) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    arr = np.asarray(pixels, dtype=np.intp).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def softmax_cross_entropy_forward(logits: np.ndarray, pixels: Sequence[Pixel], category: int) -> np.ndarray:
    """Sum over ``pixels`` of -log softmax_K(logits[0, :, r, c])[category]."""
    rows, cols = _pixel_index(pixels)
    z = logits[0][:, rows, cols]
    logp = log_softmax(z, axis=0)
    return -logp[category].sum()


def softmax_cross_entropy_backward(g: np.ndarray, logits: np.ndarray, pixels: Sequence[Pixel], category: int) -> np.ndarray:
    rows, cols = _pixel_index(pixels)
    p = softmax(logits[0][:, rows, cols], axis=0)
    p[category] -= 1.0
    dz = np.zeros_like(logits)
    for k in range(logits.shape[1]):
        np.add.at(dz[0, k], (rows, cols), g * p[k])
    return dz


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------
# Tape
# ------------------------------------------------------------
class Node:
    __slots__ = ("value", "grad", "requires_grad", "leaf", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool, leaf: bool, name: Optional[str] = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.leaf = leaf
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.name}, shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Node, ...]
    output: Node
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]
    saved: Dict[str, Any] = field(default_factory=dict)


class ComputationTape:
    """
    Records primitive ops in execution order and differentiates them in exact
    reverse order.

    Primitive set: conv2d, relu, add, max_pool3x3, sigmoid,
    softmax_cross_entropy, sum, scale.
    """

    def __init__(self, dtype: Any = np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self.entries: List[TapeEntry] = []
        self.backward_order: List[int] = []

    # --- leaves ---
    def variable(self, value: Any, name: Optional[str] = None) -> Node:
        return Node(np.array(value, dtype=self.dtype), requires_grad=True, leaf=True, name=name)

    def constant(self, value: Any, name: Optional[str] = None) -> Node:
        return Node(np.asarray(value, dtype=self.dtype), requires_grad=False, leaf=True, name=name)

    def _record(
        self,
        op: str,
        inputs: Tuple[Node, ...],
        forward: Callable[..., np.ndarray],
        backward: Callable[..., Tuple[Optional[np.ndarray], ...]],
        saved: Optional[Dict[str, Any]] = None,
    ) -> Node:
        value = np.asarray(forward(*[n.value for n in inputs]), dtype=self.dtype)
        out = Node(value, requires_grad=any(n.requires_grad for n in inputs), leaf=False, name=op)
        self.entries.append(TapeEntry(op, inputs, out, forward, backward, saved or {}))
        return out

    # --- primitives ---
    def conv2d(self, x: Node, w: Node, b: Node, stride: int = 1, padding: int = 0, dilation: int = 1) -> Node:
        if x.value.ndim != 4 or w.value.ndim != 4:
            raise RejectedInputError(f"conv2d expects NCHW input and OCkk weights, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise RejectedInputError(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
        saved = {"stride": stride, "padding": padding, "dilation": dilation}

        def backward(g):
            return conv2d_backward(g, x.value, w.value, stride, padding,
                                   (x.requires_grad, w.requires_grad, b.requires_grad), dilation)

        forward = partial(conv2d_forward, stride=stride, padding=padding, dilation=dilation)
        return self._record("conv2d", (x, w, b), forward, backward, saved)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._record("relu", (x,), lambda v: np.where(v > 0, v, 0),
                            lambda g: (g * mask,), {"mask": mask})

    def add(self, a: Node, b: Node) -> Node:
        return self._record("add", (a, b), np.add,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def max_pool3x3(self, x: Node) -> Node:
        _, arg = max_pool3x3_forward(x.value)
        return self._record("max_pool3x3", (x,), lambda v: max_pool3x3_forward(v)[0],
                            lambda g: (max_pool3x3_backward(g, arg),), {"argmax": arg})

    def sigmoid(self, x: Node) -> Node:
        s = sigmoid(x.value)
        return self._record("sigmoid", (x,), sigmoid, lambda g: (g * s * (1.0 - s),), {"output": s})

    def softmax_cross_entropy(self, logits: Node, pixels: Sequence[Pixel], category: int) -> Node:
        if logits.value.ndim != 4 or logits.shape[0] != 1:
            raise RejectedInputError(f"softmax_cross_entropy expects 1xKxhxw logits, got {logits.shape}")
        if not 0 <= category < logits.shape[1]:
            raise RejectedInputError(f"category {category} outside [0, {logits.shape[1]})")
        pixels = [tuple(map(int, p)) for p in pixels]
        return self._record(
            "softmax_cross_entropy", (logits,),
            partial(softmax_cross_entropy_forward, pixels=pixels, category=category),
            lambda g: (softmax_cross_entropy_backward(g, logits.value, pixels, category),),
            {"pixels": pixels, "category": category},
        )

    def sum(self, x: Node) -> Node:
        return self._record("sum", (x,), np.sum, lambda g: (np.broadcast_to(g, x.shape).copy(),))

    def scale(self, x: Node, factor: Union[float, np.ndarray]) -> Node:
        factor = np.asarray(factor, dtype=self.dtype)
        if np.broadcast_shapes(x.shape, factor.shape) != x.shape:
            raise RejectedInputError(f"scale factor {factor.shape} does not broadcast onto {x.shape}")
        return self._record("scale", (x,), lambda v: v * factor, lambda g: (g * factor,), {"factor": factor})

    # --- execution ---
    def replay(self) -> List[np.ndarray]:
        """Re-run every recorded op from the leaf values; returns the fresh outputs in record order."""
        fresh: Dict[int, np.ndarray] = {}
        outputs: List[np.ndarray] = []
        for entry in self.entries:
            args = [fresh.get(id(n), n.value) for n in entry.inputs]
            value = np.asarray(entry.forward(*args), dtype=self.dtype)
            fresh[id(entry.output)] = value
            outputs.append(value)
        return outputs

    def backward(self, node: Node, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if node.value.size != 1:
                raise ContractViolationError(
                    f"backward needs a scalar loss, got shape {node.shape}; pass an explicit seed"
                )
            seed = np.ones_like(node.value)
        self.backward_from({node: seed})

    def backward_from(self, seeds: Dict[Node, np.ndarray]) -> None:
        """Vector-Jacobian product from one or more nodes; leaf gradients land in ``Node.grad``."""
        grads: Dict[int, np.ndarray] = {}
        for node, seed in seeds.items():
            seed = np.asarray(seed, dtype=self.dtype)
            if seed.shape != node.shape:
                raise ContractViolationError(f"seed shape {seed.shape} != node shape {node.shape}")
            self._accumulate(grads, node, seed)

        self.backward_order = []
        for index in range(len(self.entries) - 1, -1, -1):
            entry = self.entries[index]
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            self.backward_order.append(index)
            for node, ig in zip(entry.inputs, entry.backward(g)):
                if ig is not None and node.requires_grad:
                    self._accumulate(grads, node, np.asarray(ig, dtype=self.dtype))

    @staticmethod
    def _accumulate(grads: Dict[int, np.ndarray], node: Node, g: np.ndarray) -> None:
        if node.leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
        else:
            key = id(node)
            grads[key] = g if key not in grads else grads[key] + g
