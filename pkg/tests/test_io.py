from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpf.core import NeuralPointField
from gpf.io import (FormatError, cameras_read, cameras_write, gpff_read, gpff_write, load_field, load_params,
                    pfm_read, pfm_write, ply_read, ply_write, png_read, png_write, save_field, save_params)
from conftest import simple_view

FIX = Path(__file__).parent / "fixtures"
THREE = np.array([[0, 0, 0], [1.5, -2, 0.25], [-3, 4.125, 10]])


def test_external_ascii_ply_fixture():
    pos, col = ply_read(FIX / "three_points_ascii.ply")
    assert np.array_equal(pos, THREE)
    assert np.array_equal(col, np.eye(3))


def test_external_big_endian_ply_fixture():
    pos, col = ply_read(FIX / "three_points_be.ply")
    assert np.array_equal(pos, THREE) and col is None


def test_ply_round_trip(tmp_path, rng):
    pos = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    col = rng.integers(0, 256, (50, 3)) / 255.0
    ply_write(tmp_path / "a.ply", pos, col)
    p2, c2 = ply_read(tmp_path / "a.ply")
    assert np.array_equal(p2, pos) and np.array_equal(c2, col)


def test_gpff_round_trip_and_errors(tmp_path, rng):
    f = rng.normal(size=(20, 43)).astype(np.float32)
    gpff_write(tmp_path / "a.gpff", f)
    assert np.array_equal(gpff_read(tmp_path / "a.gpff"), f)
    data = (tmp_path / "a.gpff").read_bytes()
    (tmp_path / "t.gpff").write_bytes(data[:-5])
    with pytest.raises(FormatError):
        gpff_read(tmp_path / "t.gpff")
    (tmp_path / "m.gpff").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError) as e:
        gpff_read(tmp_path / "m.gpff")
    assert e.value.offset == 0
    with pytest.raises(FormatError):
        gpff_read(tmp_path / "a.gpff", expected_dim=12)


@pytest.mark.parametrize("shape", [(7, 5), (4, 6, 3)])
def test_pfm_round_trip(tmp_path, rng, shape):
    a = rng.random(shape).astype(np.float32)
    pfm_write(tmp_path / "d.pfm", a)
    assert np.array_equal(pfm_read(tmp_path / "d.pfm"), a)


def test_png_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (9, 11, 3)) / 255.0
    png_write(tmp_path / "i.png", img)
    assert np.array_equal(png_read(tmp_path / "i.png"), img)


def test_field_and_params_round_trip(tmp_path, rng):
    field = NeuralPointField.from_positions(rng.normal(size=(10, 3)).astype(np.float32).astype(np.float64),
                                            rng.random((10, 3)))
    feats = field.features
    feats[:, 3:] = rng.normal(size=(10, 40))
    field = field.with_features(feats.astype(np.float32).astype(np.float64))
    save_field(tmp_path / "s.gpff", field)
    back = load_field(tmp_path / "s.gpff")
    assert np.array_equal(back.positions, field.positions) and np.array_equal(back.features, field.features)
    w = {"a.W0": rng.normal(size=(3, 4)), "a.b0": rng.normal(size=4)}
    save_params(tmp_path / "p.npz", w, "idw", True)
    w2, agg, fetch = load_params(tmp_path / "p.npz")
    assert agg == "idw" and fetch is True and all(np.array_equal(w[k], w2[k]) for k in w)


def test_cameras_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (100, 100, 3)) / 255.0
    (tmp_path / "images").mkdir()
    png_write(tmp_path / "images" / "v0.png", img)
    v = simple_view(f=80.0)
    cameras_write(tmp_path / "cams.json", [v], ["images/v0.png"])
    (back,) = cameras_read(tmp_path / "cams.json")
    assert np.array_equal(back.intrinsics, v.intrinsics) and np.array_equal(back.world_to_cam, v.world_to_cam)
    assert np.array_equal(back.image, img)
    (back,) = cameras_read(tmp_path / "cams.json", image_dir=tmp_path / "images")
    assert np.array_equal(back.image, img)
    (tmp_path / "bad.json").write_text("[{\"K\": [1, 2]}")
    with pytest.raises(FormatError):
        cameras_read(tmp_path / "bad.json")


def test_truncated_and_malformed_ply(tmp_path, rng):
    ply_write(tmp_path / "a.ply", rng.normal(size=(5, 3)))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-7])
    with pytest.raises(FormatError) as e:
        ply_read(tmp_path / "t.ply")
    assert "byte" in str(e.value)
    (tmp_path / "m.ply").write_bytes(b"plx\n" + data[4:])
    with pytest.raises(FormatError) as e:
        ply_read(tmp_path / "m.ply")
    assert e.value.offset == 0
    text = (FIX / "three_points_ascii.ply").read_text().replace("element vertex 3", "element vertex 4")
    (tmp_path / "short.ply").write_text(text)
    with pytest.raises(FormatError):
        ply_read(tmp_path / "short.ply")


@given(st.binary(max_size=300), st.sampled_from(["ply", "gpff", "pfm"]))
def test_readers_reject_random_bytes(tmp_path_factory, blob, kind):
    p = tmp_path_factory.mktemp("fuzz") / f"x.{kind}"
    prefix = {"ply": b"ply\n", "gpff": b"GPFF", "pfm": b"Pf\n"}[kind]
    for data in (blob, prefix + blob):
        p.write_bytes(data)
        reader = {"ply": ply_read, "gpff": gpff_read, "pfm": pfm_read}[kind]
        try:
            reader(p)
        except FormatError:
            pass
