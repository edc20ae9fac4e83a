import numpy as np
import pytest

from cloudray.cloud import CaptureFeatures, NEUTRAL_COLOR, PointCloud, load_ply, save_ply


def test_cloud_defaults_mark_missing_features():
    c = PointCloud(np.zeros((4, 3)))
    assert not c.has_color.any()
    assert not c.has_capture.any()
    assert np.allclose(c.colors, NEUTRAL_COLOR)
    assert np.allclose(c.capture.stacked(), 0.0)


def test_cloud_drop_fills():
    rng = np.random.default_rng(0)
    cap = CaptureFeatures(*(rng.normal(size=(5, 3)) for _ in range(4)))
    c = PointCloud(rng.normal(size=(5, 3)), rng.uniform(size=(5, 3)), cap)
    assert c.has_color.all() and c.has_capture.all()
    c.drop_colors()
    assert not c.has_color.any()
    assert np.allclose(c.colors, 0.5)
    c.drop_capture()
    assert not c.has_capture.any()
    assert np.allclose(c.capture.stacked(), 0.0)


def test_cloud_subset_and_extend():
    rng = np.random.default_rng(1)
    c = PointCloud(rng.normal(size=(6, 3)), rng.uniform(size=(6, 3)))
    s = c.subset(np.array([0, 2, 4]))
    assert len(s) == 3
    assert np.allclose(s.positions, c.positions[[0, 2, 4]])
    e = s.extend(np.ones((2, 3)), np.full((2, 3), 0.25))
    assert len(e) == 5
    assert e.has_color.all()
    assert not e.has_capture[-2:].any()


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    rng = np.random.default_rng(2)
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.uniform(size=(50, 3)))
    path = tmp_path / "c.ply"
    save_ply(path, cloud, binary=binary)
    back = load_ply(path)
    assert len(back) == 50
    assert np.allclose(back.positions, cloud.positions, atol=1e-5)
    # colors quantized to uint8
    assert np.abs(back.colors - cloud.colors).max() <= 0.5 / 255.0 + 1e-9
    assert back.has_color.all()


def test_ply_positions_only(tmp_path):
    cloud = PointCloud(np.random.default_rng(3).normal(size=(10, 3)))
    path = tmp_path / "p.ply"
    save_ply(path, cloud)
    back = load_ply(path)
    assert not back.has_color.any()
    assert np.allclose(back.colors, 0.5)


def test_ply_with_normals(tmp_path):
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.normal(size=(8, 3)), rng.uniform(size=(8, 3)))
    normals = rng.normal(size=(8, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    path = tmp_path / "n.ply"
    save_ply(path, cloud, normals=normals)
    text = path.read_bytes()
    assert b"property float nx" in text
    back = load_ply(path)   # normals tolerated, not required downstream
    assert len(back) == 8


def test_ply_rejects_bad_files(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"not a ply at all")
    with pytest.raises(ValueError):
        load_ply(path)
    path.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 5\n"
                     b"property float x\nproperty float y\nproperty float z\n"
                     b"end_header\n\x00\x00")
    with pytest.raises(ValueError):
        load_ply(path)
