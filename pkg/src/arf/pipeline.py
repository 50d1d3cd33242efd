"""End-to-end stylization: scenes, datasets, configuration and the optimization loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import color
from .autodiff import Tensor, no_grad
from .deferred import PatchTiling, deferred_backprop_step
from .field import WHITE, Camera, VoxelGrid, fit_photometric, psnr, render_image
from .losses import content_loss, nnfm_loss
from .optim import Adam
from .vgg import FeatureBlock, VggNetwork, extract_block, preprocess

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = {"forward-facing": 0.001, "360": 0.005}
LOGIT_CLIP = 1e-4
RECON_ITERS = 150


# -- configuration ----------------------------------------------------------------

@dataclass
class StyleConfig:
    lam: float | None = None  # None -> per capture_kind default
    epochs: int = 10
    lr_start: float = 0.1
    lr_end: float = 0.01
    block_id: int = 3
    patch_size: int = 32
    seed: int = 0
    capture_kind: str = "forward-facing"
    pre_epochs: int = 2
    pre_lr: float = 0.05

    def __post_init__(self):
        if self.capture_kind not in DEFAULT_LAMBDA:
            raise ValueError(f"capture_kind must be one of {sorted(DEFAULT_LAMBDA)}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.capture_kind]
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if not 1 <= self.block_id <= 5:
            raise ValueError("block_id must be in 1..5")
        if self.epochs < 0 or self.patch_size < 1:
            raise ValueError("epochs must be >= 0 and patch_size >= 1")

    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "StyleConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(t: int, total: int, lr_start: float = 0.1, lr_end: float = 0.01) -> float:
    """Exponential decay from ``lr_start`` at t=0 to ``lr_end`` at t=total."""
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= total and total >= 1, got t={t}, total={total}")
    return lr_start * (lr_end / lr_start) ** (t / total)


# -- images and datasets -----------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


@dataclass
class Dataset:
    views: list[tuple[Camera, np.ndarray]]
    style_image: np.ndarray | None = None
    grid_path: Path | None = None

    def __post_init__(self):
        if not self.views:
            raise ValueError("dataset needs at least one view")
        sizes = {(c.width, c.height) for c, _ in self.views}
        if len(sizes) != 1:
            raise ValueError("all views must share one resolution")
        for cam, img in self.views:
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"image shape {img.shape} does not match camera {cam.width}x{cam.height}")

    @property
    def cameras(self) -> list[Camera]:
        return [c for c, _ in self.views]

    @property
    def images(self) -> list[np.ndarray]:
        return [img for _, img in self.views]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        records = []
        for i, (cam, img) in enumerate(self.views):
            name = f"view_{i:04d}.png"
            write_image(d / name, img)
            records.append({**cam.to_dict(), "image": name})
        (d / "cameras.json").write_text(json.dumps(records, indent=1))
        if self.style_image is not None:
            write_image(d / "style.png", self.style_image)

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        records = load_cameras(d / "cameras.json", raw=True)
        views = []
        for i, rec in enumerate(records):
            views.append((Camera.from_dict(rec), read_image(d / rec.get("image", f"view_{i:04d}.png"))))
        style = read_image(d / "style.png") if (d / "style.png").exists() else None
        grid = d / "scene.arfg"
        return cls(views, style, grid if grid.exists() else None)


def load_cameras(path, raw: bool = False):
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["views"]
    return data if raw else [Camera.from_dict(r) for r in data]


def save_cameras(path, cams: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1))


# -- synthetic scenes --------------------------------------------------------------

@dataclass
class Primitive:
    kind: str  # "sphere" (size = radius) or "box" (size = half extent)
    center: tuple[float, float, float]
    size: float
    albedo: tuple[float, float, float]
    sigma: float = 60.0

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.size <= 0:
            raise ValueError("primitive size must be positive")
        if self.sigma < 0:
            raise ValueError("primitive density must be non-negative")

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance, negative inside."""
        rel = pts - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(rel, axis=-1) - self.size
        q = np.abs(rel) - self.size
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)


PRESETS: dict[str, list[Primitive]] = {
    "two-spheres": [
        Primitive("sphere", (-0.5, -0.05, 0.0), 0.5, (0.85, 0.25, 0.2)),
        Primitive("sphere", (0.5, 0.1, 0.05), 0.45, (0.2, 0.45, 0.85)),
    ],
    "sphere": [Primitive("sphere", (0.0, 0.0, 0.0), 0.5, (0.8, 0.6, 0.2))],
    "sphere-box": [
        Primitive("sphere", (-0.35, 0.0, 0.1), 0.32, (0.9, 0.8, 0.2)),
        Primitive("box", (0.4, 0.0, -0.15), 0.25, (0.3, 0.7, 0.35)),
    ],
}


def logit(c, clip: float = LOGIT_CLIP) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), clip, 1 - clip)
    return np.log(c / (1 - c))


def voxelize(primitives: Sequence[Primitive], dims=(32, 32, 32), aabb=((-1, -1, -1), (1, 1, 1))) -> VoxelGrid:
    """Density = primitive density at voxel centers inside it; every voxel takes the
    albedo of its nearest primitive so that surface colors do not blend with empty space."""
    if not primitives:
        raise ValueError("scene needs at least one primitive")
    grid = VoxelGrid.empty(dims, aabb)
    axes = [grid.aabb[0][a] + (np.arange(dims[a]) + 0.5) * grid.voxel_size[a] for a in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    dist = np.stack([p.distance(centers) for p in primitives])
    nearest = np.argmin(dist, axis=0)
    density = np.zeros(dims, dtype=np.float32)
    albedo = np.zeros(tuple(dims) + (3,))
    for i, p in enumerate(primitives):
        density[dist[i] <= 0] = np.maximum(density[dist[i] <= 0], p.sigma)
        albedo[nearest == i] = p.albedo
    grid.density[...] = density
    grid.color_logits[...] = logit(albedo)
    return grid


def orbit_cameras(count: int, radius: float = 3.2, size: int = 64, fov_deg: float = 40.0,
                  elevations=(20.0, 40.0), phase: float = 0.0) -> list[Camera]:
    """Cameras on a circle around the origin, cycling through the given elevations."""
    cams = []
    for i in range(count):
        az = 2 * math.pi * (i + phase) / count
        el = math.radians(elevations[i % len(elevations)])
        eye = radius * np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)])
        cams.append(Camera.look_at(eye, (0, 0, 0), size, size, fov_deg))
    return cams


def synthetic_style(size: int = 256, seed: int = 0, period: int = 16) -> np.ndarray:
    """High-contrast diagonal stripes and dots in a small random palette."""
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0, 1, (4, 3))
    palette[0] = (0.95, 0.8, 0.1)
    palette[1] = (0.1, 0.1, 0.35)
    y, x = np.mgrid[0:size, 0:size]
    stripe = ((x + y) // max(1, period // 2)) % 2
    img = palette[stripe]
    for _ in range(6):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(size / 16, size / 6)
        mask = (x - cx) ** 2 + (y - cy) ** 2 < r * r
        img[mask] = palette[2 + int(rng.integers(2))]
    return img.astype(np.float32)


def generate_synthetic_scene(primitives: Sequence[Primitive], dims=(32, 32, 32), n_cameras: int = 8,
                             radius: float = 3.2, size: int = 64, seed: int = 0,
                             bg=WHITE) -> tuple[VoxelGrid, Dataset]:
    if n_cameras < 1:
        raise ValueError("need at least one camera")
    grid = voxelize(primitives, dims)
    cams = orbit_cameras(n_cameras, radius, size)
    views = [(cam, render_image(grid, cam, bg=bg)) for cam in cams]
    return grid, Dataset(views, synthetic_style(seed=seed))


# -- stylization ---------------------------------------------------------------------

@dataclass
class StylizeResult:
    grid: VoxelGrid
    background: np.ndarray
    nnfm_history: list[float] = field(default_factory=list)
    pre_transform: color.ColorTransform | None = None
    final_transform: color.ColorTransform | None = None
    prefit_grid: VoxelGrid | None = None  # after the photometric pre-fit
    optimized_grid: VoxelGrid | None = None  # after the style loop, before the final color pass

    def epoch_means(self, n_views: int) -> list[float]:
        h = np.asarray(self.nnfm_history)
        return [float(h[i:i + n_views].mean()) for i in range(0, len(h), n_views)]


def image_features(net: VggNetwork, image, block_id: int) -> FeatureBlock:
    """Block features of an ``H x W x 3`` image tensor or array."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    return extract_block(net, preprocess(img.transpose(2, 0, 1)), block_id)


def bake_color_transform(grid: VoxelGrid, t: color.ColorTransform) -> VoxelGrid:
    """Apply ``A c + b`` to every voxel color and re-encode as logits."""
    out = grid.copy()
    mapped = t.apply(grid.colors())
    out.color_logits[...] = logit(mapped).astype(np.float32)
    return out


def transform_background(bg, t: color.ColorTransform) -> np.ndarray:
    return np.clip(t.apply(np.asarray(bg, dtype=np.float64)), 0.0, 1.0)


def stylize_radiance_field(grid: VoxelGrid, dataset: Dataset, cfg: StyleConfig, net: VggNetwork,
                           bg=WHITE, step: float | None = None) -> StylizeResult:
    """Recolor, pre-fit, optimize the style loss over colors, then apply a final color pass.

    Density is frozen throughout.  The background color is treated as part of the
    scene's appearance: both color transforms are applied to it as well, which
    keeps renders exactly affine-equivariant to the baked voxel transform.
    """
    if dataset.style_image is None:
        raise ValueError("stylization needs a style image")
    style = np.asarray(dataset.style_image, dtype=np.float32)
    cams = dataset.cameras
    n_views = len(cams)
    rng = np.random.default_rng(cfg.seed)

    work = grid.copy()
    work.density_frozen = True
    density_before = work.density.tobytes()

    recolored, pre_t = color.match_colors(dataset.images, style)
    background = transform_background(bg, pre_t)
    log.info("pre color transfer done")

    work = fit_photometric(work, list(zip(cams, recolored)), cfg.pre_epochs * n_views, cfg.pre_lr,
                           patch_size=cfg.patch_size, step=step, bg=background, seed=cfg.seed)

    prefit = work.copy()

    with no_grad():
        f_style = image_features(net, style, cfg.block_id)
        f_content = [image_features(net, img, cfg.block_id) for img in recolored]

    opt = Adam()
    total = max(1, cfg.epochs * n_views)
    history: list[float] = []
    it = 0
    for epoch in range(cfg.epochs):
        for v in rng.permutation(n_views):
            cam = cams[v]
            terms = {}

            def loss_fn(img: Tensor, v=v, terms=terms) -> Tensor:
                feats = image_features(net, img, cfg.block_id)
                style_term, _ = nnfm_loss(feats, f_style)
                terms["nnfm"] = float(style_term.data)
                if cfg.lam == 0:
                    return style_term
                return style_term + content_loss(feats, f_content[v]) * float(cfg.lam)

            tiling = PatchTiling.for_size(cam.width, cam.height, cfg.patch_size)
            loss, grads = deferred_backprop_step(work, cam, loss_fn, tiling, step, background)
            lr = lr_schedule(it, total, cfg.lr_start, cfg.lr_end)
            opt.step("color_logits", work.color_logits, grads["color_logits"], lr)
            history.append(terms["nnfm"])
            it += 1
        log.info("epoch %d: mean nnfm %.5f", epoch, float(np.mean(history[-n_views:])))

    optimized = work.copy()
    renders = [render_image(work, cam, step, background) for cam in cams]
    final_t = color.solve_color_transform(color.color_stats(np.concatenate([r.reshape(-1, 3) for r in renders])),
                                          color.color_stats(style))
    work = bake_color_transform(work, final_t)
    background = transform_background(background, final_t)

    if work.density.tobytes() != density_before:
        raise RuntimeError("density changed during stylization")
    return StylizeResult(work, background, history, pre_t, final_t, prefit, optimized)


def psnr_of(grid: VoxelGrid, cam: Camera, image: np.ndarray, bg=WHITE) -> float:
    return psnr(render_image(grid, cam, bg=bg), image)


def render_novel_path(grid: VoxelGrid, path: Sequence[Camera], out_dir, bg=WHITE,
                      step: float | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, cam in enumerate(path):
        target = out / f"frame_{i:04d}.png"
        write_image(target, render_image(grid, cam, step, bg))
        files.append(target)
    return files
