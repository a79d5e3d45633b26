import json
import subprocess
import sys
from pathlib import Path

import pytest

from demprompt.cli import EXIT_NOT_IMPROVED, EXIT_USAGE, main
from demprompt.raster import read_raster, write_raster
from demprompt.terrain import SceneClass, generate_terrain, scene_params

SMALL_MODEL = {"input_size": 64, "vit_patch": 16, "embed_dim": 16, "depth": 2, "heads": 2,
               "tap_layers": [1, 1, 2, 2], "decoder_channels": [8, 8, 8, 8],
               "prompt_channels": 4, "head_channels": 4}


def write_config(root: Path, **kw) -> Path:
    cfg = {"seed": 3, "samples_per_class": 10, "scene_size": 100, "model": SMALL_MODEL,
           "train": {"epochs": 1, "lr": 1e-3, "prompt": {"factor": 4}}, "classifier_epochs": 1}
    cfg.update(kw)
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert run("synth", "--config", cfg, "--out", root / "data") == 0
    for scene in SceneClass:
        assert run("train", "--config", cfg, "--scene", scene.value, "--data", root / "data",
                   "--out", root / "weights", "--no-figures") == 0
    assert run("classify", "--config", cfg, "--train", "--data", root / "data") == 0
    return root, cfg


def scene_inputs(root, scene="urban"):
    d = root / "data" / "scenes" / scene
    return [d / f"rgb_{k}.r32g" for k in range(3)], d


def test_synth_layout_and_determinism(ws, tmp_path):
    root, cfg = ws
    data = root / "data"
    dirs = [p for p in data.glob("*/*") if (p / "manifest.json").exists() and p.parent.name != "scenes"]
    assert len(dirs) == 30
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["counts"] == {"Bare": 10, "Urban": 10, "Vegetated": 10}
    for e in manifest["samples"][::7]:
        sample = json.loads((data / e["path"] / "manifest.json").read_text())
        assert sample["scene_class"] == e["scene_class"]
        regen = generate_terrain(scene_params(SceneClass(e["scene_class"]), e["seed"], 64))
        assert read_raster(data / e["path"] / "dsm.r32g") == regen.dsm
    assert run("synth", "--config", cfg, "--out", tmp_path / "again", "--n", "2") == 0
    for rel in ("bare/00001/dsm.r32g", "vegetated/00000/rgb_2.r32g"):
        assert (tmp_path / "again" / rel).read_bytes() == (data / rel).read_bytes()


def test_train_registers_one_entry_each(ws):
    root, _ = ws
    reg = json.loads((root / "weights" / "registry.json").read_text())
    assert sorted(reg["entries"]) == ["lowres/Bare", "lowres/Urban", "lowres/Vegetated"]
    man = json.loads((root / "weights" / "lowres_urban.json").read_text())
    assert man["task"] == "lowres" and len(man["history"]) == 2


def test_fine_tune_without_init_is_rejected(ws, tmp_path, capsys):
    root, _ = ws
    cfg = write_config(tmp_path)
    code = run("train", "--config", cfg, "--task", "void", "--scene", "Bare", "--data", root / "data",
               "--out", tmp_path / "w")
    assert code == EXIT_USAGE
    assert "low-res checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "w").exists()


def test_infer_mosaic_round_trip(ws, tmp_path, capsys):
    root, cfg = ws
    rgb, d = scene_inputs(root)
    assert run("infer", "--config", cfg, "--rgb", *rgb, "--prompt", d / "prompt_lowres.r32g",
               "--out", tmp_path / "patches") == 0
    patches = json.loads((tmp_path / "patches" / "patches.json").read_text())
    assert len(patches["patches"]) == 4
    assert all(abs(sum(p["probabilities"]) - 1) < 1e-5 for p in patches["patches"])
    capsys.readouterr()
    assert run("mosaic", "--config", cfg, "--patches", tmp_path / "patches", "--out", tmp_path / "dem.r32g") == 0
    cov = json.loads(capsys.readouterr().out)
    assert cov["zero_weight_pixels"] == 0 and cov["patches"] == 4
    dem, src = read_raster(tmp_path / "dem.r32g"), read_raster(d / "dsm.r32g")
    assert dem.shape == src.shape and dem.cell_size == src.cell_size
    assert (dem.origin_x, dem.origin_y) == (src.origin_x, src.origin_y)
    assert (tmp_path / "dem.png").exists()


def test_force_class_bypasses_classifier(ws, tmp_path):
    root, _ = ws
    cfg = write_config(tmp_path, registry=str(root / "weights" / "registry.json"),
                       classifier=str(tmp_path / "missing.p2dw"))
    rgb, d = scene_inputs(root, "bare")
    args = ["infer", "--config", cfg, "--rgb", *rgb, "--prompt", d / "prompt_lowres.r32g"]
    assert run(*args, "--out", tmp_path / "routed") == EXIT_USAGE       # classifier needed but absent
    assert run(*args, "--out", tmp_path / "forced", "--force-class", "Vegetated") == 0
    patches = json.loads((tmp_path / "forced" / "patches.json").read_text())["patches"]
    assert {p["scene_class"] for p in patches} == {"Vegetated"}
    assert all(p["probabilities"] is None for p in patches)


def test_infer_errors(ws, tmp_path, capsys):
    root, cfg = ws
    rgb, d = scene_inputs(root)
    small = tmp_path / "small"
    small.mkdir()
    for k, p in enumerate(rgb):
        g = read_raster(p)
        write_raster(g.with_values(g.values[:40, :40].copy()), small / f"rgb_{k}.r32g")
    code = run("infer", "--config", cfg, "--rgb", *[small / f"rgb_{k}.r32g" for k in range(3)],
               "--prompt", d / "prompt_lowres.r32g", "--out", tmp_path / "p1")
    assert code == EXIT_USAGE and "smaller than tile_size" in capsys.readouterr().err
    code = run("infer", "--config", cfg, "--task", "update", "--rgb", *rgb,
               "--prompt", d / "prompt_update.r32g", "--out", tmp_path / "p2")
    err = capsys.readouterr().err
    assert code == EXIT_USAGE and "lowres/Urban" in err
    assert not (tmp_path / "p1").exists() and not (tmp_path / "p2").exists()


def test_mosaic_rejects_empty_patch_dir(ws, tmp_path):
    _, cfg = ws
    (tmp_path / "empty").mkdir()
    assert run("mosaic", "--config", cfg, "--patches", tmp_path / "empty", "--out", tmp_path / "o.r32g") == EXIT_USAGE
    assert not (tmp_path / "o.r32g").exists()


def test_hydro_truth_against_itself(ws, tmp_path):
    root, cfg = ws
    _, d = scene_inputs(root, "vegetated")
    assert run("hydro", "--config", cfg, "--dem", d / "dsm.r32g", "--truth", d / "dsm.r32g",
               "--radii", "1", "2", "--out", tmp_path / "h", "--no-figures") == 0
    rep = json.loads((tmp_path / "h" / "hydro.json").read_text())
    assert rep["threshold"] == 50 and [m["radius_cells"] for m in rep["metrics"]] == [1.0, 2.0]
    assert all(m[k] == 1.0 for m in rep["metrics"] for k in ("iou", "precision", "recall", "f1"))
    assert run("hydro", "--config", cfg, "--dem", d / "dsm.r32g", "--threshold", "0",
               "--out", tmp_path / "bad") == EXIT_USAGE
    assert not (tmp_path / "bad").exists()


def test_eval_table_and_require_improvement(ws, tmp_path, capsys):
    root, cfg = ws
    _, d = scene_inputs(root)
    truth, base = d / "dsm.r32g", d / "baseline_lowres.r32g"
    assert run("eval", "--config", cfg, "--truth", truth, "--candidate", truth, "--baseline", base,
               "--streams", "--out", tmp_path / "e1") == 0
    table = capsys.readouterr().out
    rows = [line.split()[0] for line in table.splitlines() if line.split()]
    assert rows.index("Elevation") < rows.index("Slope") < rows.index("Aspect")
    rep = json.loads((tmp_path / "e1" / "report.json").read_text())
    assert rep["errors"]["elevation"]["candidate"]["rmse"] == 0.0
    assert {p.name for p in (tmp_path / "e1").iterdir()} >= {"report.json", "report.txt", "dems.png"}
    code = run("eval", "--config", cfg, "--truth", truth, "--candidate", base, "--baseline", base,
               "--require-improvement", "--no-figures", "--out", tmp_path / "e2")
    assert code == EXIT_NOT_IMPROVED
    code = run("eval", "--config", cfg, "--truth", truth, "--candidate", base, "--baseline", base,
               "--region", d / "hole.r32g", "--no-figures", "--out", tmp_path / "e3")
    assert code == 0
    assert json.loads((tmp_path / "e3" / "report.json").read_text())["region_cells"] == 50 * 50


def test_argument_errors_leave_no_outputs(ws, tmp_path):
    root, cfg = ws
    out = tmp_path / "o"
    assert run("eval", "--config", cfg, "--truth", tmp_path / "nope.r32g", "--candidate", "x",
               "--baseline", "y", "--out", out) == EXIT_USAGE
    assert run("synth", "--config", cfg, "--out", out, "--n", "0") == EXIT_USAGE
    assert run("train", "--config", cfg, "--scene", "Bare", "--data", tmp_path / "nodata", "--out", out) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"overlap": 64}))
    assert run("synth", "--config", bad, "--out", out) == EXIT_USAGE
    assert not out.exists()
    with pytest.raises(SystemExit) as exc:
        run("train", "--scene", "Desert", "--data", root, "--out", out)
    assert exc.value.code == 2 and not out.exists()


def test_thread_env_is_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("P2D_THREADS", "many")
    assert run("synth", "--out", tmp_path / "s", "--n", "1") == EXIT_USAGE
    assert run("synth", "--deterministic", "--out", tmp_path / "s", "--n", "1") == 0


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "demprompt.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train", "infer", "mosaic", "hydro", "eval"):
        assert cmd in out.stdout
