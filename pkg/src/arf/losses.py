"""Feature-space losses: nearest-neighbor feature matching, content, and Gram."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cosine_distance, matmul, transpose
from .vgg import FeatureBlock

NN_BLOCK = 4096
EPS = 1e-8


@dataclass
class NNAssignment:
    """For each render-feature pixel (row-major), the matched style pixel and its distance."""

    render_shape: tuple[int, int]
    style_shape: tuple[int, int]
    index: np.ndarray  # flat style pixel index per render pixel
    distance: np.ndarray

    def matched(self, i: int, j: int) -> tuple[int, int]:
        k = int(self.index[i * self.render_shape[1] + j])
        return divmod(k, self.style_shape[1])


def _tensor(f) -> Tensor:
    return f.data if isinstance(f, FeatureBlock) else f if isinstance(f, Tensor) else Tensor(f)


def _pixels(arr: np.ndarray) -> np.ndarray:
    c = arr.shape[0]
    return arr.reshape(c, -1).T.astype(np.float64)


def nearest_neighbors(render: np.ndarray, style: np.ndarray, block: int = NN_BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """Exact argmin of cosine distance from each render row to the style rows.

    Style rows are scanned in blocks of ``block`` to bound the distance matrix.
    Ties resolve to the lowest style index.
    """
    nr = np.sum(render * render, axis=1)
    ns = np.sum(style * style, axis=1)
    best = np.full(render.shape[0], np.inf)
    arg = np.zeros(render.shape[0], dtype=np.int64)
    for lo in range(0, style.shape[0], block):
        s = style[lo:lo + block]
        prod = np.outer(nr, ns[lo:lo + block])
        dist = np.where(prod > 0, 1.0 - (render @ s.T) / np.sqrt(prod + EPS), 1.0)
        local = np.argmin(dist, axis=1)
        val = dist[np.arange(dist.shape[0]), local]
        better = val < best
        best[better] = val[better]
        arg[better] = local[better] + lo
    return arg, np.clip(best, 0.0, 2.0)


def nnfm_loss(f_render, f_style) -> tuple[Tensor, NNAssignment]:
    """Mean over render pixels of the cosine distance to the nearest style feature.

    The match is found once per call and held fixed for the backward pass;
    the style features are treated as constants.
    """
    render = _tensor(f_render)
    style = _tensor(f_style).data
    if render.shape[0] != style.shape[0]:
        raise ValueError(f"channel mismatch: {render.shape[0]} vs {style.shape[0]}")
    c = render.shape[0]
    style_px = _pixels(style)
    idx, dist = nearest_neighbors(_pixels(render.data), style_px)
    rows = transpose(render.reshape(c, -1), None)
    d = cosine_distance(rows, style_px[idx].astype(render.data.dtype))
    assignment = NNAssignment(tuple(render.shape[1:]), tuple(style.shape[1:]), idx, dist)
    return d.mean(), assignment


def content_loss(f_render, f_content) -> Tensor:
    render, content = _tensor(f_render), _tensor(f_content)
    if render.shape != content.shape:
        raise ValueError(f"shape mismatch: {render.shape} vs {content.shape}")
    return (render - content.data).square().mean()


def gram_matrix(f: Tensor) -> Tensor:
    c = f.shape[0]
    flat = f.reshape(c, -1)
    n = flat.shape[1]
    return matmul(flat, transpose(flat, None)) * (1.0 / n)


def gram_loss(f_render, f_style) -> Tensor:
    render, style = _tensor(f_render), _tensor(f_style)
    if render.shape[0] != style.shape[0]:
        raise ValueError(f"channel mismatch: {render.shape[0]} vs {style.shape[0]}")
    target = gram_matrix(Tensor(style.data)).data
    return (gram_matrix(render) - target).square().mean()


def total_loss(f_render, f_style, f_content, lam: float) -> Tensor:
    """NNFM style term plus ``lam`` times the content term."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    style_term, _ = nnfm_loss(f_render, f_style)
    if lam == 0:
        return style_term
    return style_term + content_loss(f_render, f_content) * float(lam)
