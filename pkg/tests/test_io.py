import json
import math

import numpy as np
import pytest

from helpers import rand_scene
from texgs.camera import Camera, look_at
from texgs.io import (
    TOY_GENERATORS,
    load_checkpoint,
    load_dataset,
    make_toy_scene,
    read_image,
    save_checkpoint,
    write_image,
)
from texgs.io.checkpoint import (
    CheckpointCountMismatch,
    CheckpointTruncated,
    CheckpointVersionError,
    read_ply,
)
from texgs.io.dataset import (
    DatasetFileMissing,
    InconsistentImages,
    MalformedDataset,
    write_dataset,
)
from texgs.io.toy import CHECK_A, CHECK_B
from texgs.texture import write_tgtx


def make_blender(root, n=3, size=(6, 5), angle=math.pi / 2, rgba=None):
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i in range(n):
        M = np.eye(4)
        M[:3, 3] = [i, 0, 4]
        img = np.zeros((size[1], size[0], 4)) if rgba is None else rgba
        write_image(root / f"r_{i}.png", img)
        frames.append({"file_path": f"./r_{i}", "transform_matrix": M.tolist()})
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": angle, "frames": frames}))
    return root


# ---- dataset ------------------------------------------------------------

def test_focal_from_fov(tmp_path):
    ds = load_dataset(make_blender(tmp_path, size=(800, 2)))
    assert ds.cameras[0].fx == pytest.approx(400.0)


def test_alpha_compositing(tmp_path):
    img = np.zeros((2, 2, 4))
    img[0, 0] = [0.2, 0.4, 0.6, 1.0]
    make_blender(tmp_path, n=1, size=(2, 2), rgba=img)
    white = load_dataset(tmp_path, background="white").images[0]
    black = load_dataset(tmp_path, background="black").images[0]
    np.testing.assert_allclose(white[0, 0], black[0, 0])
    np.testing.assert_allclose(white[0, 0], np.round(np.array([0.2, 0.4, 0.6]) * 255) / 255, atol=1e-7)
    np.testing.assert_array_equal(white[1, 1], [1, 1, 1])
    np.testing.assert_array_equal(black[1, 1], [0, 0, 0])


def test_frame_order_preserved(tmp_path):
    make_blender(tmp_path, n=4)
    meta = json.loads((tmp_path / "transforms_train.json").read_text())
    meta["frames"] = meta["frames"][::-1]
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    ds = load_dataset(tmp_path)
    assert ds.names == ["./r_3", "./r_2", "./r_1", "./r_0"]
    assert [c.center[0] for c in ds.cameras] == pytest.approx([3, 2, 1, 0])


def test_distinct_errors(tmp_path):
    with pytest.raises(DatasetFileMissing):
        load_dataset(tmp_path)
    make_blender(tmp_path, n=2)
    (tmp_path / "r_1.png").unlink()
    with pytest.raises(DatasetFileMissing):
        load_dataset(tmp_path)
    write_image(tmp_path / "r_1.png", np.zeros((7, 7, 3)))
    with pytest.raises(InconsistentImages):
        load_dataset(tmp_path)
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(MalformedDataset):
        load_dataset(tmp_path)


def test_non_rigid_pose(tmp_path):
    make_blender(tmp_path, n=1)
    meta = json.loads((tmp_path / "transforms_train.json").read_text())
    meta["frames"][0]["transform_matrix"][0][0] = 1.01
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(MalformedDataset):
        load_dataset(tmp_path)


def test_write_then_load(tmp_path):
    ds = make_toy_scene("checkerboard-quad", n_views=3, width=16, height=16)
    write_dataset(ds, tmp_path, "train")
    back = load_dataset(tmp_path)
    assert len(back) == 3
    for a, b in zip(ds.cameras, back.cameras):
        np.testing.assert_allclose(a.world_to_cam, b.world_to_cam, atol=1e-12)
        assert a.fx == pytest.approx(b.fx)
    for a, b in zip(ds.images, back.images):
        assert np.abs(a - b).max() <= 0.5 / 255 + 1e-7


def test_tgim_round_trip(tmp_path, rng):
    img = rng.random((5, 7, 3)).astype(np.float32)
    write_image(tmp_path / "x.tgim", img)
    np.testing.assert_array_equal(read_image(tmp_path / "x.tgim"), img)


# ---- checkpoint ---------------------------------------------------------

def _assert_same(a, b):
    assert a.variant is b.variant
    for k, v in a.params().items():
        w = b.params()[k]
        assert v.dtype == w.dtype and v.tobytes() == w.tobytes(), k
    assert a.sh_degree == b.sh_degree and a.m == b.m


@pytest.mark.parametrize("variant", ["none", "alpha", "rgb", "rgba"])
@pytest.mark.parametrize("T", [1, 2, 4, 8, 16])
def test_round_trip_bit_exact(tmp_path, variant, T):
    s = rand_scene(np.random.default_rng(T), variant, n=10, T=T, dtype=np.float32)
    save_checkpoint(s, {"seed": 3}, tmp_path / "ck")
    back, meta = load_checkpoint(tmp_path / "ck", with_meta=True)
    _assert_same(s, back)
    assert meta == {"seed": 3}


def test_round_trip_float64_untextured(tmp_path, rng):
    s = rand_scene(rng, "none", n=10)
    save_checkpoint(s, {}, tmp_path / "ck")
    _assert_same(s, load_checkpoint(tmp_path / "ck"))


def test_none_writes_no_tgtx(tmp_path, rng):
    save_checkpoint(rand_scene(rng, "none", dtype=np.float32), {}, tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["meta.json", "point_cloud.ply"]


def test_ply_uses_3dgs_names(tmp_path, rng):
    save_checkpoint(rand_scene(rng, "none", deg=1, dtype=np.float32), {}, tmp_path / "ck")
    names = read_ply(tmp_path / "ck" / "point_cloud.ply").dtype.names
    assert names[:9] == ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2")
    assert names[-8:] == ("opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
    assert sum(n.startswith("f_rest_") for n in names) == 9


def test_count_mismatch(tmp_path, rng):
    save_checkpoint(rand_scene(rng, "rgb", n=4, dtype=np.float32), {}, tmp_path / "ck")
    write_tgtx(tmp_path / "ck" / "textures.tgtx", np.zeros((3, 4, 4, 3), np.float32))
    with pytest.raises(CheckpointCountMismatch):
        load_checkpoint(tmp_path / "ck")


def test_version_mismatch(tmp_path, rng):
    save_checkpoint(rand_scene(rng, "none", dtype=np.float32), {}, tmp_path / "ck")
    p = tmp_path / "ck" / "meta.json"
    info = json.loads(p.read_text())
    info["version"] = 99
    p.write_text(json.dumps(info))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ck")


def test_truncated_ply(tmp_path, rng):
    save_checkpoint(rand_scene(rng, "none", dtype=np.float32), {}, tmp_path / "ck")
    p = tmp_path / "ck" / "point_cloud.ply"
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CheckpointTruncated):
        load_checkpoint(tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


def test_overwrite_is_clean(tmp_path, rng):
    save_checkpoint(rand_scene(rng, "rgb", dtype=np.float32), {}, tmp_path / "ck")
    s = rand_scene(rng, "none", dtype=np.float32)
    save_checkpoint(s, {}, tmp_path / "ck")
    assert not (tmp_path / "ck" / "textures.tgtx").exists()
    assert [p.name for p in tmp_path.iterdir()] == ["ck"]
    _assert_same(s, load_checkpoint(tmp_path / "ck"))


# ---- toy scenes ---------------------------------------------------------

def test_checkerboard_views():
    ds = make_toy_scene("checkerboard-quad", n_views=8, width=64, height=64)
    assert len(ds) == 8
    for img in ds.images:
        px = img.reshape(-1, 3)
        assert np.any(np.abs(px - CHECK_A).max(axis=1) < 1e-6)
        assert np.any(np.abs(px - CHECK_B).max(axis=1) < 1e-6)


@pytest.mark.parametrize("name", TOY_GENERATORS)
def test_toy_deterministic(name):
    a = make_toy_scene(name, seed=4, width=24, height=24)
    b = make_toy_scene(name, seed=4, width=24, height=24)
    assert b"".join(i.tobytes() for i in a.images) == b"".join(i.tobytes() for i in b.images)
    assert all(np.array_equal(x.world_to_cam, y.world_to_cam) for x, y in zip(a.cameras, b.cameras))


def test_occluding_quad_hides_overlap():
    ds = make_toy_scene("two-quads-occlusion", width=64, height=64)
    cam, img = ds.cameras[0], ds.images[0]
    assert np.allclose(cam.center, [0, 0, 3.5])
    corners = np.array([[x, y, 0.5, 1.0] for x in (-0.5, 0.5) for y in (-0.5, 0.5)])
    c = (cam.world_to_cam @ corners.T)[:3]
    u = cam.fx * c[0] / c[2] + cam.cx
    v = cam.fy * c[1] / c[2] + cam.cy
    # pixels whose whole footprint lies inside the projected front quad
    i0, i1 = int(np.ceil(u.min())), int(np.floor(u.max()))
    j0, j1 = int(np.ceil(v.min())), int(np.floor(v.max()))
    assert i1 - i0 > 10
    inner = img[j0:j1, i0:i1]
    np.testing.assert_allclose(inner, np.broadcast_to([0.2, 0.8, 0.3], inner.shape), atol=1e-6)


def test_unknown_toy():
    with pytest.raises(ValueError):
        make_toy_scene("teapot")
    with pytest.raises(ValueError):
        make_toy_scene("checkerboard-quad", split="val")


def test_toy_independent_of_renderer():
    import texgs.io.toy as toy
    src = open(toy.__file__).read()
    assert "texgs.render" not in src
