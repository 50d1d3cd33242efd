"""VGG-16 convolutional trunk: weight file I/O and per-block feature extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Graph, Tensor, backward, concat, conv2d, maxpool2x2, relu

MAGIC = b"VGGW"
VERSION = 1

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# (block, layer name, in channels, out channels); a 2x2 max-pool separates blocks
ARCHITECTURE: tuple[tuple[int, str, int, int], ...] = (
    (1, "conv1_1", 3, 64),
    (1, "conv1_2", 64, 64),
    (2, "conv2_1", 64, 128),
    (2, "conv2_2", 128, 128),
    (3, "conv3_1", 128, 256),
    (3, "conv3_2", 256, 256),
    (3, "conv3_3", 256, 256),
    (4, "conv4_1", 256, 512),
    (4, "conv4_2", 512, 512),
    (4, "conv4_3", 512, 512),
    (5, "conv5_1", 512, 512),
    (5, "conv5_2", 512, 512),
    (5, "conv5_3", 512, 512),
)

BLOCK_CHANNELS = {b: sum(o for blk, _, _, o in ARCHITECTURE if blk == b) for b in range(1, 6)}


class WeightLoadError(ValueError):
    """Raised for malformed or incomplete VGG weight files."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class VggNetwork:
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]

    def __post_init__(self):
        for arr in (*self.weights.values(), *self.biases.values()):
            arr.setflags(write=False)


@dataclass
class FeatureBlock:
    block_id: int
    data: Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _expected_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for _, name, cin, cout in ARCHITECTURE:
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def random_network(seed: int = 0) -> VggNetwork:
    """Deterministic stand-in weights: normal with std 1/sqrt(fan-in)."""
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for _, name, cin, cout in ARCHITECTURE:
        fan_in = cin * 9
        weights[name] = (rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(fan_in)).astype(np.float32)
        biases[name] = (0.01 * rng.standard_normal(cout)).astype(np.float32)
    return VggNetwork(weights, biases)


def save_weights(path, net: VggNetwork) -> None:
    entries = []
    for _, name, _, _ in ARCHITECTURE:
        entries.append((f"{name}.weight", net.weights[name]))
        entries.append((f"{name}.bias", net.biases[name]))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for key, arr in entries:
            raw = key.encode("ascii")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> VggNetwork:
    """Read a VGGW file and validate it against the VGG-16 layer table."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightLoadError("unexpected end of file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightLoadError("bad magic, not a VGGW weight file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightLoadError(f"unsupported version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        key = take(name_len).decode("ascii")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if key in arrays:
            raise WeightLoadError("duplicate entry", key.split(".")[0])
        arrays[key] = arr

    weights, biases = {}, {}
    for key, shape in _expected_shapes().items():
        layer = key.split(".")[0]
        if key not in arrays:
            raise WeightLoadError(f"missing entry {key}", layer)
        if arrays[key].shape != shape:
            raise WeightLoadError(f"{key} has shape {arrays[key].shape}, expected {shape}", layer)
        (weights if key.endswith(".weight") else biases)[layer] = arrays[key]
    return VggNetwork(weights, biases)


def preprocess(image: Tensor) -> Tensor:
    """ImageNet mean/std normalization of a 3 x H x W image in [0, 1]."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {image.shape}")
    scale = (1.0 / IMAGENET_STD)[:, None, None]
    shift = (-IMAGENET_MEAN / IMAGENET_STD)[:, None, None]
    return image * scale.astype(image.data.dtype) + shift.astype(image.data.dtype)


def extract_block(net: VggNetwork, image: Tensor, block_id: int) -> FeatureBlock:
    """Run the trunk up to ``block_id`` and concatenate that block's relu outputs."""
    if not 1 <= block_id <= 5:
        raise ValueError(f"block_id must be in 1..5, got {block_id}")
    _, h, w = image.shape
    need = 2 ** (block_id - 1)
    if h < need or w < need:
        raise ValueError(f"image {h}x{w} is too small for block {block_id}")
    x = image
    current = 1
    outputs: list[Tensor] = []
    for blk, name, _, _ in ARCHITECTURE:
        if blk > block_id:
            break
        if blk != current:
            x = maxpool2x2(x)
            current = blk
        x = relu(conv2d(x, net.weights[name], net.biases[name]))
        if blk == block_id:
            outputs.append(x)
    return FeatureBlock(block_id, concat(outputs, axis=0))


def image_gradient(net: VggNetwork, image, loss: Callable[[FeatureBlock], Tensor], block_id: int) -> np.ndarray:
    """d loss / d image through preprocessing and the trunk, image as 3 x H x W."""
    with Graph():
        leaf = Tensor(np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32),
                      requires_grad=True, key="image")
        value = loss(extract_block(net, preprocess(leaf), block_id))
        if not isinstance(value, Tensor) or value.node is None:
            return np.zeros(leaf.shape, dtype=np.float32)
        return backward(value)["image"]
