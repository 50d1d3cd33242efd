"""Command-line interface: ``arf <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import color, pipeline
from .autodiff import memory_meter, no_grad
from .deferred import PatchTiling, deferred_backprop_step, monolithic_backprop_step
from .field import WHITE, VoxelGrid, fit_photometric, render_image
from .losses import content_loss, nnfm_loss
from .vgg import WeightLoadError, load_weights, random_network

log = logging.getLogger("arf")


def _network(path: str | None):
    path = path or os.environ.get("ARF_WEIGHTS")
    if path:
        return load_weights(path)
    log.warning("no VGG weight file given (--weights or ARF_WEIGHTS); using seeded random weights")
    return random_network(0)


def _rgb(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected r,g,b")
    return tuple(parts)


def _sidecar(grid_path) -> Path:
    return Path(grid_path).with_suffix(".json")


def _background(grid_path, override) -> tuple[float, float, float]:
    if override is not None:
        return override
    side = _sidecar(grid_path)
    if side.exists():
        return tuple(json.loads(side.read_text()).get("background", WHITE))
    return WHITE


def cmd_make_scene(args) -> int:
    prims = pipeline.PRESETS[args.preset]
    grid, ds = pipeline.generate_synthetic_scene(prims, (args.grid,) * 3, args.views, size=args.size,
                                                 seed=args.seed)
    ds.save(args.out)
    grid.save(Path(args.out) / "scene.arfg")
    print(f"wrote {len(ds.views)} views, style.png and scene.arfg to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    ds = pipeline.Dataset.load(args.data)
    init = VoxelGrid.empty((args.grid,) * 3, density=args.init_density)
    history: list[float] = []
    grid = fit_photometric(init, ds.views, args.iters, args.lr, patch_size=args.patch, seed=args.seed,
                           history=history)
    grid.save(args.out)
    if history:
        print(f"final loss {np.mean(history[-len(ds.views):]):.6f}")
    scores = [pipeline.psnr_of(grid, cam, img) for cam, img in ds.views]
    print(f"training PSNR {np.mean(scores):.2f} dB; wrote {args.out}")
    return 0


def _style_config(args) -> pipeline.StyleConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {"lambda": args.lam, "epochs": args.epochs, "block_id": args.block, "patch_size": args.patch,
                 "seed": args.seed, "capture_kind": args.capture_kind}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return pipeline.StyleConfig.from_dict(base)


def cmd_stylize(args) -> int:
    cfg = _style_config(args)
    ds = pipeline.Dataset.load(args.data)
    ds.style_image = pipeline.read_image(args.style)
    grid = VoxelGrid.load(args.grid)
    result = pipeline.stylize_radiance_field(grid, ds, cfg, _network(args.weights))
    result.grid.save(args.out)
    _sidecar(args.out).write_text(json.dumps({
        "background": [float(v) for v in result.background],
        "config": json.loads(cfg.to_json()),
        "nnfm_epoch_means": result.epoch_means(len(ds.views)),
    }, indent=2))
    if args.render_dir:
        pipeline.render_novel_path(result.grid, ds.cameras, args.render_dir, bg=result.background)
    print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    grid = VoxelGrid.load(args.grid)
    cams = pipeline.load_cameras(args.cameras)
    files = pipeline.render_novel_path(grid, cams, args.out, bg=_background(args.grid, args.bg))
    print(f"wrote {len(files)} frames to {args.out}")
    return 0


def cmd_color_transfer(args) -> int:
    images = [pipeline.read_image(p) for p in args.images]
    recolored, t = color.match_colors(images, pipeline.read_image(args.style))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src, img in zip(args.images, recolored):
        pipeline.write_image(out / Path(src).name, img)
    print("A =", np.array2string(t.A, precision=6))
    print("b =", np.array2string(t.b, precision=6))
    return 0


def cmd_features(args) -> int:
    net = _network(args.weights)
    with no_grad():
        fb = pipeline.image_features(net, pipeline.read_image(args.image), args.block)
    d = fb.data.data
    print(f"block {fb.block_id}: {fb.channels} x {fb.height} x {fb.width}")
    print(f"mean {d.mean():.6f} std {d.std():.6f} min {d.min():.6f} max {d.max():.6f} "
          f"zero-fraction {(d == 0).mean():.4f}")
    return 0


def grad_check(grid: VoxelGrid, size: int, patch: int, net, block_id: int = 3, lam: float = 0.001,
               seed: int = 0) -> dict:
    """Deferred vs monolithic gradients for NNFM + content loss on one view."""
    cam = pipeline.orbit_cameras(1, size=size)[0]
    style = pipeline.synthetic_style(size, seed)
    with no_grad():
        f_style = pipeline.image_features(net, style, block_id)
        recolored, _ = color.match_colors([render_image(grid, cam)], style)
        f_content = pipeline.image_features(net, recolored[0], block_id)

    def loss_fn(img):
        feats = pipeline.image_features(net, img, block_id)
        return nnfm_loss(feats, f_style)[0] + content_loss(feats, f_content) * lam

    with memory_meter() as deferred_mem:
        loss_d, g_d = deferred_backprop_step(grid, cam, loss_fn, PatchTiling.for_size(size, size, patch))
    with memory_meter() as mono_mem:
        loss_m, g_m = monolithic_backprop_step(grid, cam, loss_fn)
    dev = max(float(np.max(np.abs(g_d[k] - g_m[k]))) for k in g_m)
    scale = max(float(np.max(np.abs(g_m[k]))) for k in g_m)
    return {"loss_deferred": loss_d, "loss_monolithic": loss_m, "max_abs_deviation": dev, "max_abs_grad": scale,
            "peak_elements_deferred": deferred_mem.peak_elements, "peak_elements_monolithic": mono_mem.peak_elements}


def cmd_grad_check(args) -> int:
    grid = VoxelGrid.load(args.grid)
    report = grad_check(grid, args.size, args.patch, _network(args.weights), args.block, args.lam)
    for key, value in report.items():
        print(f"{key}: {value:.6g}" if isinstance(value, float) else f"{key}: {value}")
    return 0 if report["max_abs_deviation"] <= args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arf", description="Artistic radiance fields on voxel grids.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", help="generate a synthetic posed-image dataset")
    s.add_argument("--preset", choices=sorted(pipeline.PRESETS), default="two-spheres")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--grid", type=int, default=32)
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("reconstruct", help="fit a voxel grid to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=int, default=32)
    s.add_argument("--iters", type=int, default=pipeline.RECON_ITERS)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--init-density", type=float, default=1.0)
    s.add_argument("--patch", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("stylize", help="stylize a reconstructed grid with a style image")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weights")
    s.add_argument("--config")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--block", type=int, choices=range(1, 6))
    s.add_argument("--patch", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--capture-kind", choices=sorted(pipeline.DEFAULT_LAMBDA))
    s.add_argument("--render-dir")
    s.set_defaults(func=cmd_stylize)

    s = sub.add_parser("render", help="render a grid from cameras.json")
    s.add_argument("--grid", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bg", type=_rgb)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("color-transfer", help="recolor images to a style image's color statistics")
    s.add_argument("--style", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_color_transfer)

    s = sub.add_parser("features", help="print VGG block feature statistics for an image")
    s.add_argument("--image", required=True)
    s.add_argument("--weights")
    s.add_argument("--block", type=int, choices=range(1, 6), default=3)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("grad-check", help="compare deferred and monolithic gradients")
    s.add_argument("--grid", required=True)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--weights")
    s.add_argument("--block", type=int, choices=range(1, 6), default=3)
    s.add_argument("--lambda", dest="lam", type=float, default=0.001)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (WeightLoadError, ValueError, FloatingPointError) as exc:
        print(f"arf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"arf {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
