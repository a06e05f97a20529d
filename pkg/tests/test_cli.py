import json

import numpy as np
import pytest

from gpf.cli import main
from gpf.io import gpff_read, load_params, pfm_read, png_read


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "3", "synth", "--kind", "sphere", "--n-points", "400", "--n-views", "3",
                 "--resolution", "16", "--out", str(d / "scene")]) == 0
    cfg = json.loads((d / "scene" / "config.json").read_text())
    cfg["train"] = {"batch_rays": 64}
    cfg["finetune"] = {"stage1_iters": 5, "refine_iters": 3, "grow_batch": 64, "prune_batch": 64, "max_cycles": 1}
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d


def _run(work, name, args):
    """Run a command twice into out_a / out_b; return the two output dirs."""
    outs = []
    for tag in ("a", "b"):
        o = work / f"{name}_{tag}"
        o.mkdir(exist_ok=True)
        argv = ["--seed", "7", "--config", str(work / "cfg.json")] + [a.replace("{out}", str(o)) for a in args]
        assert main(argv) == 0
        outs.append(o)
    return outs


def _same_files(a, b):
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert fa == fb and fa
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_synth_deterministic(work, tmp_path):
    assert main(["--seed", "3", "synth", "--kind", "sphere", "--n-points", "400", "--n-views", "3",
                 "--resolution", "16", "--out", str(tmp_path / "again")]) == 0
    for name in ("points.ply", "cams.json", "held_out.json", "images/view_000.png", "depth/view_001.pfm"):
        assert (tmp_path / "again" / name).read_bytes() == (work / "scene" / name).read_bytes()


def test_fetch_train_render_finetune_edit_eval(work):
    sc = str(work / "scene")
    cams = f"{sc}/cams.json"
    a, b = _run(work, "depth", ["depth", "--points", f"{sc}/points.ply", "--cams", cams, "--view", "1",
                                "--out", "{out}/d.pfm"])
    _same_files(a, b)
    assert (pfm_read(a / "d.pfm") > 0).any()

    a, b = _run(work, "fetch", ["fetch", "--points", f"{sc}/points.ply", "--cams", cams, "--out", "{out}/f.gpff"])
    _same_files(a, b)
    assert gpff_read(a / "f.gpff").shape == (400, 43)

    a, b = _run(work, "train", ["train", "--points", f"{sc}/points.ply", "--cams", cams, "--iters", "4",
                                "--params-out", "{out}/p.npz", "--out", "{out}/s.gpff", "--metrics", "{out}/m.json"])
    _same_files(a, b)
    assert len(json.loads((a / "m.json").read_text())["loss"]) == 4
    assert load_params(a / "p.npz")[2] is True
    params, scene = str(a / "p.npz"), str(a / "s.gpff")

    a, b = _run(work, "trainf", ["train", "--scene", scene, "--cams", cams, "--params", params, "--iters", "3",
                                 "--sampler", "uni64", "--base", "2.0", "--params-out", "{out}/p.npz"])
    _same_files(a, b)

    a, b = _run(work, "render", ["render", "--scene", scene, "--cams", f"{sc}/held_out.json", "--view", "0",
                                 "--params", params, "--out", "{out}/r.png", "--float-out", "{out}/r.pfm",
                                 "--depth-out", "{out}/rd.pfm"])
    _same_files(a, b)
    img = png_read(a / "r.png")
    assert img.shape == (16, 16, 3) and img.max() > 0
    rendered = a / "r.png"

    a, b = _run(work, "finetune", ["finetune", "--stage", "all", "--scene", scene, "--cams", cams, "--params",
                                   params, "--out", "{out}/ft.gpff", "--metrics", "{out}/m.json"])
    _same_files(a, b)
    assert [r["stage"] for r in json.loads((a / "m.json").read_text())["records"]] == [1, 2, 3]

    (work / "t.json").write_text(json.dumps({"translation": [0.1, 0, 0]}))
    a, b = _run(work, "move", ["edit", "--scene", scene, "--op", "move", "--region", "sphere:0,0,0,10",
                               "--transform", str(work / "t.json"), "--out", "{out}/e.gpff"])
    _same_files(a, b)
    a, b = _run(work, "recolor", ["edit", "--scene", scene, "--op", "recolor", "--color", "1,0,0",
                                  "--out", "{out}/e.gpff"])
    _same_files(a, b)
    assert np.all(gpff_read(a / "e.gpff")[:, :3] == [1, 0, 0])
    a, b = _run(work, "transfer", ["edit", "--scene", scene, "--op", "transfer", "--source", scene, "--which", "high",
                                   "--out", "{out}/e.gpff"])
    _same_files(a, b)

    a, b = _run(work, "eval", ["eval", "--pred", str(rendered), "--gt", f"{sc}/images/held_000.png",
                               "--out", "{out}/q.json"])
    _same_files(a, b)
    assert set(json.loads((a / "q.json").read_text())) == {"psnr", "ssim"}


def test_errors_return_nonzero(work, tmp_path, capsys):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"not a ply")
    assert main(["depth", "--points", str(bad), "--cams", str(work / "scene" / "cams.json"), "--view", "0",
                 "--out", str(tmp_path / "d.pfm")]) == 2
    assert "byte 0" in capsys.readouterr().err
    (tmp_path / "c.json").write_text(json.dumps({"kernel": {"nope": 1}}))
    assert main(["--config", str(tmp_path / "c.json"), "eval", "--pred", "x", "--gt", "y"]) == 2
    assert main(["eval", "--pred", str(tmp_path / "missing.png"), "--gt", "y"]) == 2
