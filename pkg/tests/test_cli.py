import json

import numpy as np
import pytest

from printid.cli import main
from printid.geometry import ErrorModel, InfillPattern, InfillSpec, read_struts
from printid.harness import default_config
from printid.imgio import read_pgm, write_pgm
from printid.render import OpticalParams, render
from printid.geometry import Pose, generate_infill


def small_spec(**kw):
    kw.setdefault("object_size", (20.0, 20.0, 20.0))
    kw.setdefault("layer_thickness", 0.4)
    return InfillSpec(InfillPattern.DIAMOND_FILL, 0.2, **kw)


def test_gen_writes_struts(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(small_spec().to_json())
    out = tmp_path / "struts.txt"
    rc = main(["gen", "--spec", str(spec_path), "--out", str(out)])
    assert rc == 0
    rows = read_struts(out)
    assert len(rows) > 0


def test_gen_seed_override_changes_output(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(small_spec().to_json())
    out1, out2 = tmp_path / "a.txt", tmp_path / "b.txt"
    main(["gen", "--spec", str(spec_path), "--out", str(out1), "--seed", "1"])
    main(["gen", "--spec", str(spec_path), "--out", str(out2), "--seed", "2"])
    assert read_struts(out1) != read_struts(out2)


def test_render_scene_to_pgm_and_png(tmp_path):
    scene = {
        "schema": 1,
        "spec": small_spec(error=ErrorModel.zero()).to_json_dict(),
        "optics": {"mu_solid": 0.1, "diffusion_sigma": 1.0},
        "image": {"width": 48, "height": 48},
    }
    scene_path = tmp_path / "scene.json"
    scene_path.write_text(json.dumps(scene))
    out_pgm = tmp_path / "img.pgm"
    assert main(["render", "--scene", str(scene_path), "--out", str(out_pgm)]) == 0
    img = read_pgm(out_pgm)
    assert (img.width, img.height) == (48, 48)
    out_png = tmp_path / "img.png"
    assert main(["render", "--scene", str(scene_path), "--out", str(out_png), "--png"]) == 0
    assert out_png.exists()


def test_match_command_over_directory(tmp_path, capsys):
    refs = tmp_path / "refs"
    refs.mkdir()
    optics = OpticalParams(mu_solid=0.08, diffusion_sigma=1.0)
    for i, pattern in enumerate([InfillPattern.DIAMOND_FILL, InfillPattern.LINEAR]):
        spec = InfillSpec(pattern, 0.15, object_size=(25.0, 25.0, 25.0),
                          layer_thickness=0.4, seed=i)
        img = render(generate_infill(spec), optics, Pose(), 128, 128, 25.0 / 0.8 / 128)
        write_pgm(img, refs / f"obj{i}.pgm")
    out = tmp_path / "out"
    rc = main(["match", "--refs", str(refs), "--ratio", "0.7", "--out", str(out)])
    assert rc == 0
    assert (out / "match.csv").exists()
    from printid.features import MatchRateMatrix
    m = MatchRateMatrix.from_csv((out / "match.csv").read_text())
    assert m.labels == ["obj0", "obj1"]
    assert np.all(m.matched.diagonal() == m.total.diagonal())


def test_sweep_layer_command(tmp_path, capsys):
    rc = main(["sweep-layer", "--out", str(tmp_path / "out")])
    assert rc == 0
    summary = json.loads((tmp_path / "out" / "reports" / "summary.json").read_text())
    assert summary["all_passed"] is True
    out = capsys.readouterr().out
    assert "strictly_decreasing" in out


def test_dataset_command_with_config(tmp_path):
    config = default_config("classify")
    config.num_objects = 2
    config.specs = [small_spec(error=ErrorModel(0.05, 0.08, 0.2, 0.06))]
    config.pose_grid = __import__("printid.harness", fromlist=["PoseGrid"]).PoseGrid(
        grid_extent=1.0, grid_step=0.5, rotation_step=180.0)
    config.image = __import__("printid.harness", fromlist=["ImageParams"]).ImageParams(32, 32, None)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config.to_json_dict()))
    out = tmp_path / "run"
    rc = main(["dataset", "--config", str(cfg_path), "--out", str(out), "--seed", "77"])
    assert rc == 0
    assert (out / "dataset.json").exists()
    assert (out / "manifest.json").exists()
    meta = json.loads((out / "dataset.json").read_text())
    assert meta["provenance"]["master_seed"] == 77


def test_config_kind_mismatch_rejected(tmp_path):
    config = default_config("layer-sweep")
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config.to_json_dict()))
    with pytest.raises(SystemExit):
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
