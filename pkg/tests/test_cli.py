import json
import subprocess
import sys

import numpy as np
import pytest

from arf.cli import main
from arf.field import VoxelGrid
from arf.pipeline import read_image


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["make-scene", "--preset", "two-spheres", "--out", str(out), "--size", "16", "--grid", "8",
                 "--views", "2"]) == 0
    return out


def test_make_scene_files(scene_dir):
    names = {p.name for p in scene_dir.iterdir()}
    assert {"cameras.json", "view_0000.png", "view_0001.png", "style.png", "scene.arfg"} <= names
    assert len(json.loads((scene_dir / "cameras.json").read_text())) == 2


def test_reconstruct_stylize_render(scene_dir, tmp_path, weight_file, capsys):
    recon = tmp_path / "recon.arfg"
    assert main(["reconstruct", "--data", str(scene_dir), "--out", str(recon), "--grid", "8", "--iters", "2",
                 "--patch", "8"]) == 0
    assert "PSNR" in capsys.readouterr().out
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "lambda": 0.01, "pre_epochs": 1}))
    styl = tmp_path / "styl.arfg"
    assert main(["stylize", "--data", str(scene_dir), "--grid", str(recon), "--style", str(scene_dir / "style.png"),
                 "--out", str(styl), "--weights", str(weight_file), "--config", str(cfg), "--epochs", "1"]) == 0
    side = json.loads(styl.with_suffix(".json").read_text())
    assert side["config"]["epochs"] == 1 and side["config"]["lambda"] == 0.01
    assert len(side["nnfm_epoch_means"]) == 1
    assert VoxelGrid.load(styl).density.tobytes() == VoxelGrid.load(recon).density.tobytes()
    frames = tmp_path / "frames"
    assert main(["render", "--grid", str(styl), "--cameras", str(scene_dir / "cameras.json"),
                 "--out", str(frames)]) == 0
    assert sorted(p.name for p in frames.iterdir()) == ["frame_0000.png", "frame_0001.png"]


def test_stylize_requires_style(scene_dir):
    with pytest.raises(SystemExit) as info:
        main(["stylize", "--data", str(scene_dir), "--grid", "g", "--out", "o"])
    assert info.value.code == 2


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["paint"])
    assert info.value.code == 2


def test_color_transfer(scene_dir, tmp_path, capsys):
    out = tmp_path / "recolored"
    assert main(["color-transfer", "--style", str(scene_dir / "style.png"), "--out", str(out),
                 str(scene_dir / "view_0000.png"), str(scene_dir / "view_0001.png")]) == 0
    assert "A =" in capsys.readouterr().out
    assert read_image(out / "view_0000.png").shape == (16, 16, 3)


def test_features(scene_dir, weight_file, capsys):
    assert main(["features", "--image", str(scene_dir / "view_0000.png"), "--weights", str(weight_file),
                 "--block", "2"]) == 0
    assert "block 2: 256 x 8 x 8" in capsys.readouterr().out


def test_bad_weight_file(scene_dir, tmp_path, capsys):
    bad = tmp_path / "bad.vggw"
    bad.write_bytes(b"junk")
    assert main(["features", "--image", str(scene_dir / "view_0000.png"), "--weights", str(bad)]) == 1
    assert "error" in capsys.readouterr().err


def test_weights_from_environment(scene_dir, weight_file, monkeypatch, capsys):
    monkeypatch.setenv("ARF_WEIGHTS", str(weight_file))
    assert main(["features", "--image", str(scene_dir / "view_0000.png"), "--block", "1"]) == 0


def test_missing_input_is_io_error(tmp_path, capsys):
    assert main(["render", "--grid", str(tmp_path / "nope.arfg"), "--cameras", "x", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_grad_check(scene_dir, weight_file, capsys):
    assert main(["grad-check", "--grid", str(scene_dir / "scene.arfg"), "--size", "16", "--patch", "8",
                 "--weights", str(weight_file)]) == 0
    out = capsys.readouterr().out
    assert "max_abs_deviation" in out and "peak_elements_deferred" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "arf", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "grad-check" in proc.stdout


def test_render_background_override(scene_dir, tmp_path):
    out = tmp_path / "f"
    assert main(["render", "--grid", str(scene_dir / "scene.arfg"), "--cameras", str(scene_dir / "cameras.json"),
                 "--out", str(out), "--bg", "0,0,0"]) == 0
    assert np.all(read_image(out / "frame_0000.png")[0, 0] == 0)
