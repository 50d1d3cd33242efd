"""Linear color transfer matching mean and covariance of an image set to a style image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

EIG_CLAMP = 1e-8


@dataclass
class ColorStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


@dataclass
class EigenDecomposition:
    U: np.ndarray
    eigenvalues: np.ndarray


@dataclass
class ColorTransform:
    A: np.ndarray
    b: np.ndarray

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        """Unclipped affine map on the trailing RGB axis."""
        flat = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
        return (flat @ self.A.T + self.b).reshape(np.shape(pixels))

    @classmethod
    def identity(cls) -> "ColorTransform":
        return cls(np.eye(3), np.zeros(3))


def color_stats(pixels) -> ColorStats:
    """Population mean and covariance of RGB samples, in float64."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if px.shape[0] < 2:
        raise ValueError("color statistics need at least 2 pixels")
    mean = px.sum(axis=0) / px.shape[0]
    centered = px - mean
    cov = centered.T @ centered / px.shape[0]
    cov = 0.5 * (cov + cov.T)
    return ColorStats(mean, cov, px.shape[0])


def eig3_sym(m, tol: float = 1e-14, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix.

    Eigenvalues come back in descending order with matching columns of U.
    """
    a = np.array(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {a.shape}")
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(3)
    for _ in range(max_sweeps):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = a[q, p] = 0.0
            v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return EigenDecomposition(v[:, order], vals[order])


def _sym_power(eig: EigenDecomposition, power: float, clamp: float | None = None) -> np.ndarray:
    vals = eig.eigenvalues
    if clamp is not None:
        vals = np.maximum(vals, clamp)
    else:
        vals = np.maximum(vals, 0.0)
    return (eig.U * vals**power) @ eig.U.T


def solve_color_transform(stats_c: ColorStats, stats_s: ColorStats) -> ColorTransform:
    """A = Cov_s^(1/2) Cov_c^(-1/2) via eigendecompositions; b = E[s] - A E[c]."""
    whiten = _sym_power(eig3_sym(stats_c.cov), -0.5, clamp=EIG_CLAMP)
    color = _sym_power(eig3_sym(stats_s.cov), 0.5)
    a = color @ whiten
    return ColorTransform(a, stats_s.mean - a @ stats_c.mean)


def apply_transform(t: ColorTransform, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [np.clip(t.apply(img), 0.0, 1.0).astype(np.float32) for img in images]


def match_colors(images: Sequence[np.ndarray], style: np.ndarray) -> tuple[list[np.ndarray], ColorTransform]:
    """Recolor a whole image set with one shared transform fitted on the pooled pixels."""
    if len(images) == 0 or np.size(style) == 0:
        raise ValueError("match_colors needs a non-empty image set and style image")
    pooled = np.concatenate([np.asarray(img, dtype=np.float64).reshape(-1, 3) for img in images])
    t = solve_color_transform(color_stats(pooled), color_stats(style))
    return apply_transform(t, images), t
