"""Deferred back-propagation of full-image losses into the voxel grid.

The image is rendered once without recording, the loss gradient with respect
to its pixels is cached, and each patch is then re-rendered differentiably and
back-propagated with its slice of the cached gradient.  Only one patch graph
is alive at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Graph, GradStore, Tensor, backward
from .field import WHITE, Camera, Rect, VoxelGrid, render_image, render_patch_with_grad

LossFn = Callable[[Tensor], Tensor]


@dataclass
class CachedGradientImage:
    width: int
    height: int
    grad: np.ndarray  # H x W x 3


@dataclass
class PatchTiling:
    width: int
    height: int
    patch_size: int
    rects: list[Rect]

    @classmethod
    def for_size(cls, width: int, height: int, patch_size: int = 32) -> "PatchTiling":
        """Row-major square tiles; tiles on the right and bottom edges are truncated."""
        if patch_size < 1:
            raise ValueError("patch_size must be positive")
        rects = [(x, y, min(patch_size, width - x), min(patch_size, height - y))
                 for y in range(0, height, patch_size) for x in range(0, width, patch_size)]
        return cls(width, height, patch_size, rects)

    def validate(self, width: int, height: int) -> None:
        if (self.width, self.height) != (width, height):
            raise ValueError(f"tiling is for {self.width}x{self.height}, image is {width}x{height}")
        cover = np.zeros((height, width), dtype=np.int64)
        for x, y, w, h in self.rects:
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
                raise ValueError(f"patch {(x, y, w, h)} lies outside the image")
            cover[y:y + h, x:x + w] += 1
        if not np.all(cover == 1):
            raise ValueError("patches must cover every pixel exactly once")


def cached_pixel_gradients(image: np.ndarray, loss_fn: LossFn) -> tuple[float, CachedGradientImage]:
    """Loss value and d loss / d pixel with the image as the only leaf."""
    img = np.asarray(image, dtype=np.float32)
    with Graph():
        leaf = Tensor(img, requires_grad=True, key="image")
        loss = loss_fn(leaf)
        value = float(np.asarray(loss.data if isinstance(loss, Tensor) else loss).reshape(-1)[0])
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        if isinstance(loss, Tensor) and loss.node is not None:
            grad = backward(loss)["image"]
        else:
            grad = np.zeros_like(img)
    return value, CachedGradientImage(img.shape[1], img.shape[0], grad)


def backprop_patches(grid: VoxelGrid, cam: Camera, cached: CachedGradientImage, tiling: PatchTiling,
                     step: float | None = None, bg=WHITE, grads: GradStore | None = None) -> GradStore:
    """Chain cached pixel gradients into grid parameters, one patch graph at a time."""
    store = GradStore() if grads is None else grads
    for x, y, w, h in tiling.rects:
        upstream = cached.grad[y:y + h, x:x + w]
        with Graph():
            patch = render_patch_with_grad(grid, cam, (x, y, w, h), step, bg)
            backward((patch * upstream).sum(), store)
    return store


def deferred_backprop_step(grid: VoxelGrid, cam: Camera, loss_fn: LossFn, tiling: PatchTiling,
                           step: float | None = None, bg=WHITE) -> tuple[float, GradStore]:
    tiling.validate(cam.width, cam.height)
    image = render_image(grid, cam, step, bg)
    loss, cached = cached_pixel_gradients(image, loss_fn)
    return loss, backprop_patches(grid, cam, cached, tiling, step, bg)


def monolithic_backprop_step(grid: VoxelGrid, cam: Camera, loss_fn: LossFn, step: float | None = None,
                             bg=WHITE) -> tuple[float, GradStore]:
    """Reference path: one graph spanning the full render and the loss."""
    with Graph():
        image = render_patch_with_grad(grid, cam, (0, 0, cam.width, cam.height), step, bg)
        loss = loss_fn(image)
        return float(loss.data), backward(loss)
