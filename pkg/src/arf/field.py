"""Dense voxel radiance field with diffuse color and differentiable volume rendering.

Conventions: voxel ``(i, j, k)`` is centered at ``aabb_min + (ijk + 0.5) * voxel_size``;
cameras follow the pinhole model with +x right, +y down, +z forward in camera
space; images are ``H x W x 3`` float arrays in [0, 1].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, active_graph, no_grad, sigmoid

MAGIC = b"ARFG"
VERSION = 1
WHITE = (1.0, 1.0, 1.0)

# (x, y, width, height) in pixels
Rect = tuple[int, int, int, int]


@dataclass
class VoxelGrid:
    density: np.ndarray
    color_logits: np.ndarray
    aabb: np.ndarray
    density_frozen: bool = False

    def __post_init__(self):
        self.density = np.ascontiguousarray(self.density, dtype=np.float32)
        self.color_logits = np.ascontiguousarray(self.color_logits, dtype=np.float32)
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise ValueError(f"density must be nx x ny x nz with every extent >= 2, got {self.density.shape}")
        if self.color_logits.shape != self.density.shape + (3,):
            raise ValueError("color_logits must have shape dims + (3,)")
        if np.any(self.aabb[1] <= self.aabb[0]):
            raise ValueError("aabb max must exceed aabb min on every axis")
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")

    @classmethod
    def empty(cls, dims=(32, 32, 32), aabb=((-1, -1, -1), (1, 1, 1)), density: float = 0.0,
              logit: float = 0.0) -> "VoxelGrid":
        dims = tuple(int(d) for d in dims)
        return cls(np.full(dims, density, np.float32), np.full(dims + (3,), logit, np.float32), np.asarray(aabb))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.density.shape

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / np.asarray(self.dims)

    @property
    def default_step(self) -> float:
        return float(np.linalg.norm(self.voxel_size)) / 4.0

    def max_samples(self, step: float) -> int:
        return int(math.ceil(float(np.linalg.norm(self.aabb[1] - self.aabb[0])) / step)) + 1

    def colors(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.color_logits.astype(np.float64)))

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.density.copy(), self.color_logits.copy(), self.aabb.copy(), self.density_frozen)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I3I", VERSION, *self.dims), struct.pack("<6d", *self.aabb.reshape(-1)),
                 self.density.astype("<f4").tobytes(), self.color_logits.astype("<f4").tobytes(),
                 struct.pack("<B", int(self.density_frozen))]
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VoxelGrid":
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC:
            raise ValueError(f"{path}: not an ARFG grid checkpoint")
        version, nx, ny, nz = struct.unpack_from("<I3I", buf, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        aabb = np.array(struct.unpack_from("<6d", buf, 20)).reshape(2, 3)
        n = nx * ny * nz
        off = 68
        if len(buf) != off + 16 * n + 1:
            raise ValueError(f"{path}: truncated or oversized checkpoint")
        density = np.frombuffer(buf, "<f4", n, off).reshape(nx, ny, nz)
        logits = np.frombuffer(buf, "<f4", 3 * n, off + 4 * n).reshape(nx, ny, nz, 3)
        return cls(density.copy(), logits.copy(), aabb, bool(buf[-1]))


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(3, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = self.cam_to_world[:, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-5:
            raise ValueError("cam_to_world rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_deg: float = 40.0, up=(0, 0, 1)) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (1.0, 0.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        c2w = np.column_stack([right, down, fwd, eye])
        return cls(width, height, focal, focal, width / 2, height / 2, c2w)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy, "cx": self.cx,
                "cy": self.cy, "cam_to_world": [float(v) for v in self.cam_to_world.reshape(-1)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]),
                   float(d["cy"]), np.asarray(d["cam_to_world"], dtype=np.float64))


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]


def intersect_aabb(origins: np.ndarray, dirs: np.ndarray, aabb: np.ndarray):
    """Slab test; returns (t_near, t_far, hit) with t_near clamped to >= 0."""
    lo, hi = aabb[0], aabb[1]
    zero = dirs == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    hit = t_far > t_near
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


def generate_rays(cam: Camera, aabb, rect: Rect | None = None) -> RayBatch:
    """One ray per pixel center of ``rect`` (whole image by default), row-major."""
    x0, y0, w, h = rect if rect is not None else (0, 0, cam.width, cam.height)
    ys, xs = np.meshgrid(np.arange(y0, y0 + h, dtype=np.float64), np.arange(x0, x0 + w, dtype=np.float64),
                         indexing="ij")
    local = np.stack([(xs.ravel() + 0.5 - cam.cx) / cam.fx, (ys.ravel() + 0.5 - cam.cy) / cam.fy,
                      np.ones(xs.size)], axis=1)
    rot = cam.cam_to_world[:, :3]
    # elementwise rather than BLAS so each ray is independent of the batch size
    dirs = local[:, 0:1] * rot[:, 0] + local[:, 1:2] * rot[:, 1] + local[:, 2:3] * rot[:, 2]
    dirs /= np.sqrt(dirs[:, 0:1] ** 2 + dirs[:, 1:2] ** 2 + dirs[:, 2:3] ** 2)
    origins = np.broadcast_to(cam.cam_to_world[:, 3], dirs.shape).copy()
    t_near, t_far, hit = intersect_aabb(origins, dirs, np.asarray(aabb, dtype=np.float64).reshape(2, 3))
    return RayBatch(origins, dirs, t_near, t_far, hit)


# -- sampling ------------------------------------------------------------------------

_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def trilinear_weights(grid: VoxelGrid, points: np.ndarray):
    """Flat corner indices and weights (both ``N x 8``) for world points.

    Points outside the AABB get zero weights.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(grid.dims)
    u = (pts - grid.aabb[0]) / grid.voxel_size - 0.5
    u = np.clip(u, 0.0, dims - 1)
    i0 = np.minimum(np.floor(u), dims - 2).astype(np.int64)
    f = u - i0
    inside = np.all((pts >= grid.aabb[0]) & (pts <= grid.aabb[1]), axis=1)
    idx = np.empty((pts.shape[0], 8), dtype=np.int64)
    wts = np.empty((pts.shape[0], 8), dtype=np.float64)
    ny, nz = grid.dims[1], grid.dims[2]
    for c, (dx, dy, dz) in enumerate(_CORNERS):
        idx[:, c] = ((i0[:, 0] + dx) * ny + (i0[:, 1] + dy)) * nz + (i0[:, 2] + dz)
        wts[:, c] = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
    wts *= inside[:, None]
    return idx, wts


def _blend(values: np.ndarray, idx: np.ndarray, wts: np.ndarray) -> np.ndarray:
    out = wts[:, 0, None] * values[idx[:, 0]]
    for c in range(1, 8):
        out = out + wts[:, c, None] * values[idx[:, c]]
    return out


def trilerp(param, idx: np.ndarray, wts: np.ndarray) -> Tensor:
    """Differentiable weighted gather of ``param`` rows (``V x ch``)."""
    values = param.data if isinstance(param, Tensor) else np.asarray(param)
    out = _blend(values, idx, wts)
    n_vox, ch = values.shape

    def vjp(g):
        grad = np.empty((n_vox, ch), dtype=np.float64)
        flat = idx.ravel()
        for k in range(ch):
            grad[:, k] = np.bincount(flat, weights=(wts * g[:, k, None]).ravel(), minlength=n_vox)
        return (grad.astype(values.dtype),)

    return Tensor._from_op(out, "trilerp", (param,), vjp, saved=idx.size + wts.size)


def sample_field(grid: VoxelGrid, x) -> tuple[np.ndarray, np.ndarray]:
    """(density, rgb) at world points; density is zero outside the AABB."""
    pts = np.asarray(x, dtype=np.float64)
    idx, wts = trilinear_weights(grid, pts)
    sigma = _blend(grid.density.reshape(-1, 1).astype(np.float64), idx, wts)[:, 0]
    logits = _blend(grid.color_logits.reshape(-1, 3).astype(np.float64), idx, wts)
    rgb = 1.0 / (1.0 + np.exp(-logits))
    shape = pts.shape[:-1]
    return sigma.reshape(shape), rgb.reshape(shape + (3,))


@dataclass
class Samples:
    idx: np.ndarray  # valid samples x 8
    wts: np.ndarray
    sel: np.ndarray  # flat positions of the valid samples in the rays x samples layout
    delta: np.ndarray  # rays x samples, zero past each ray's exit


def march(grid: VoxelGrid, rays: RayBatch, step: float) -> Samples:
    """Midpoint samples of fixed world step; the final segment is truncated at t_far.

    The sample count per ray is padded to a grid-wide constant so that a ray's
    arithmetic never depends on which other rays share the batch.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n_max = grid.max_samples(step)
    length = rays.t_far - rays.t_near
    count = np.where(rays.hit, np.ceil(length / step), 0).astype(np.int64)
    count = np.minimum(count, n_max)
    k = np.arange(n_max, dtype=np.float64)[None, :]
    seg_start = rays.t_near[:, None] + k * step
    seg_end = np.where(k == count[:, None] - 1, rays.t_far[:, None], seg_start + step)
    valid = k < count[:, None]
    delta = np.where(valid, seg_end - seg_start, 0.0)
    sel = np.flatnonzero(valid)
    ray_of = sel // n_max
    t_mid = 0.5 * (seg_start.ravel()[sel] + seg_end.ravel()[sel])
    pts = rays.origins[ray_of] + t_mid[:, None] * rays.dirs[ray_of]
    idx, wts = trilinear_weights(grid, pts)
    return Samples(idx, wts, sel, delta)


def scatter_rows(x, sel: np.ndarray, n: int) -> Tensor:
    """Place rows of ``x`` at positions ``sel`` of an ``n``-row zero array."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = np.zeros((n,) + xd.shape[1:], dtype=xd.dtype)
    out[sel] = xd
    return Tensor._from_op(out, "scatter_rows", (x,), lambda g: (g[sel],), saved=sel.size)


def composite(sigma, rgb, delta: np.ndarray, bg) -> Tensor:
    """Alpha compositing of ``rays x samples`` densities and colors over ``bg``."""
    sd = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma)
    cd = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    bg = np.asarray(bg, dtype=np.float64)
    tau = sd * delta
    cum = np.cumsum(tau, axis=1)
    excl = np.concatenate([np.zeros_like(cum[:, :1]), cum[:, :-1]], axis=1)
    trans = np.exp(-excl)
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    t_final = np.exp(-cum[:, -1])
    color = (weights[..., None] * cd).sum(axis=1) + t_final[:, None] * bg

    def vjp(g):
        g_rgb = weights[..., None] * g[:, None, :]
        cg = (cd * g[:, None, :]).sum(axis=2)
        q = weights * cg
        suffix = np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
        suffix = np.concatenate([suffix[:, 1:], np.zeros_like(suffix[:, :1])], axis=1)
        tail = t_final * (g @ bg)
        g_sigma = delta * (trans * np.exp(-tau) * cg - suffix - tail[:, None])
        return g_sigma, g_rgb

    return Tensor._from_op(color, "composite", (sigma, rgb), vjp, saved=4 * sd.size + cd.size)


def compositing_weights(grid: VoxelGrid, rays: RayBatch, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weights ``T_k alpha_k`` and final transmittance, for diagnostics."""
    s = march(grid, rays, step)
    sigma = np.zeros(s.delta.size)
    sigma[s.sel] = _blend(grid.density.reshape(-1, 1).astype(np.float64), s.idx, s.wts)[:, 0]
    tau = sigma.reshape(s.delta.shape) * s.delta
    cum = np.cumsum(tau, axis=1)
    excl = np.concatenate([np.zeros_like(cum[:, :1]), cum[:, :-1]], axis=1)
    return np.exp(-excl) * -np.expm1(-tau), np.exp(-cum[:, -1])


def _render_rays(grid: VoxelGrid, rays: RayBatch, step: float, bg, density=None, logits=None) -> Tensor:
    s = march(grid, rays, step)
    shape = s.delta.shape
    dens = grid.density.reshape(-1, 1) if density is None else density
    lgt = grid.color_logits.reshape(-1, 3) if logits is None else logits
    n = s.delta.size
    sigma = scatter_rows(trilerp(dens, s.idx, s.wts), s.sel, n).reshape(shape)
    rgb = scatter_rows(sigmoid(trilerp(lgt, s.idx, s.wts)), s.sel, n).reshape(shape + (3,))
    return composite(sigma, rgb, s.delta, bg)


def _to_image(color: Tensor, h: int, w: int) -> Tensor:
    data = color.data
    out = data.reshape(h, w, 3).astype(np.float32)
    return Tensor._from_op(out, "to_image", (color,), lambda g: (g.reshape(-1, 3).astype(np.float64),))


def render_ray(grid: VoxelGrid, origin, direction, step: float | None = None, bg=WHITE) -> np.ndarray:
    """Color of a single ray (direction need not be normalized)."""
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    t_near, t_far, hit = intersect_aabb(o, d, grid.aabb)
    with no_grad():
        color = _render_rays(grid, RayBatch(o, d, t_near, t_far, hit), step or grid.default_step, bg)
    return color.data[0].astype(np.float32)


def render_image(grid: VoxelGrid, cam: Camera, step: float | None = None, bg=WHITE, chunk: int = 4096) -> np.ndarray:
    """Full ``H x W x 3`` render with recording disabled."""
    step = step or grid.default_step
    rays = generate_rays(cam, grid.aabb)
    out = np.empty((len(rays), 3), dtype=np.float32)
    with no_grad():
        for lo in range(0, len(rays), chunk):
            sl = slice(lo, lo + chunk)
            part = RayBatch(rays.origins[sl], rays.dirs[sl], rays.t_near[sl], rays.t_far[sl], rays.hit[sl])
            out[sl] = _render_rays(grid, part, step, bg).data.astype(np.float32)
    return out.reshape(cam.height, cam.width, 3)


def render_patch_with_grad(grid: VoxelGrid, cam: Camera, rect: Rect, step: float | None = None, bg=WHITE) -> Tensor:
    """Differentiable ``h x w x 3`` render of ``rect`` on the active graph.

    Leaves are keyed ``"color_logits"`` (shape dims + (3,)) and, unless the
    grid's density is frozen, ``"density"`` (shape dims).
    """
    if active_graph() is None:
        raise RuntimeError("render_patch_with_grad needs an active Graph")
    x0, y0, w, h = rect
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > cam.width or y0 + h > cam.height:
        raise ValueError(f"patch {rect} is outside the {cam.width}x{cam.height} image")
    logits = Tensor(grid.color_logits, requires_grad=True, key="color_logits").reshape(-1, 3)
    if grid.density_frozen:
        density = None
    else:
        density = Tensor(grid.density, requires_grad=True, key="density").reshape(-1, 1)
    rays = generate_rays(cam, grid.aabb, rect)
    color = _render_rays(grid, rays, step or grid.default_step, bg, density=density, logits=logits)
    return _to_image(color, h, w)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


def fit_photometric(grid: VoxelGrid, views: Sequence[tuple[Camera, np.ndarray]], iters: int, lr: float, *,
                    patch_size: int = 32, step: float | None = None, bg=WHITE, seed: int = 0,
                    history: list[float] | None = None) -> VoxelGrid:
    """Fit density (unless frozen) and colors to posed images by mean squared pixel error.

    Each iteration draws a random view and computes its exact full-image gradient
    through the deferred patch machinery, then takes an Adam step.  Density is
    clamped to be non-negative after every update.
    """
    from .deferred import PatchTiling, deferred_backprop_step
    from .optim import Adam

    if not views:
        raise ValueError("fit_photometric needs at least one view")
    out = grid.copy()
    rng = np.random.default_rng(seed)
    opt = Adam()
    for _ in range(iters):
        cam, target = views[int(rng.integers(len(views)))]
        target = np.asarray(target, dtype=np.float32)

        def loss_fn(img: Tensor) -> Tensor:
            return (img - target).square().mean()

        tiling = PatchTiling.for_size(cam.width, cam.height, patch_size)
        loss, grads = deferred_backprop_step(out, cam, loss_fn, tiling, step, bg)
        if history is not None:
            history.append(loss)
        opt.step("color_logits", out.color_logits, grads["color_logits"], lr)
        if not out.density_frozen:
            opt.step("density", out.density, grads["density"], lr)
            np.maximum(out.density, 0.0, out=out.density)
    return out
