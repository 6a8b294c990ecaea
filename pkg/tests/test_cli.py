import json

import numpy as np
import pytest

from m3slam.cli import main
from m3slam.geom import read_tum


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["gen-scene", "--preset", "loop", "--frames", "10", "--out", str(out)]) == 0
    return out


def test_gen_scene_writes_dumps_and_gt(scene_dir):
    assert len(list(scene_dir.glob("frame_*.m3pd"))) == 10
    meta = json.loads((scene_dir / "meta.json").read_text())
    assert meta["n_frames"] == 10 and meta["preset"] == "loop"
    stamps, poses = read_tum(scene_dir / "gt.tum")
    assert list(stamps) == list(range(10)) and len(poses) == 10


def test_eval_self_is_zero(scene_dir, capsys):
    gt = str(scene_dir / "gt.tum")
    assert main(["eval", "--traj", gt, "--ref", gt, "--align", "sim3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ate_rmse"] < 1e-12 and out["n_poses"] == 10


def test_run_render_eval(scene_dir, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["run", "--provider.kind=dump", f"--provider.dump_dir={scene_dir}", "--gsmap.final_iters=5",
               "--seed", "0", "--out", str(out)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_frames"] == 10 and report == json.loads((out / "report.json").read_text())
    for name in ("trajectory.tum", "keyframes.csv", "edges.csv", "map.ply", "timings.json", "config.ini"):
        assert (out / name).exists(), name
    assert main(["eval", "--traj", str(out / "trajectory.tum"), "--ref", str(scene_dir / "gt.tum")]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["ate_rmse"] == pytest.approx(report["ate_rmse"], rel=1e-9)

    lines = (out / "trajectory.tum").read_text().splitlines()
    k = next(i for i, t in enumerate(lines) if not t.startswith("#"))
    scale = lines[k - 1].split("=")[1] if k else "1"
    img = tmp_path / "view.png"
    assert main(["render", "--ply", str(out / "map.ply"), "--pose", lines[k], "--scale", scale,
                 "--out", str(img)]) == 0
    from PIL import Image

    arr = np.asarray(Image.open(img))
    assert arr.shape == (36, 48, 3) and arr.max() > 0


def test_run_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[provider]\nframes = 6\nnoise = clean\n\n[gsmap]\nenabled = false\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["n_frames"] == 6


def test_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["run", "--matching.bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["eval", "--traj", str(tmp_path / "missing.tum"), "--ref", str(tmp_path / "x.tum")]) == 2
    assert main(["render", "--ply", "x.ply", "--pose", "1 2 3", "--out", "y.png"]) == 2
    assert main(["run", "--provider.kind=dump", f"--provider.dump_dir={tmp_path}"]) == 2
    with pytest.raises(SystemExit):
        main(["gen-scene", "--preset", "nowhere", "--out", str(tmp_path)])
