import json

import numpy as np
import pytest

from data_models import Displacement, PointCloud, RegionLabels
from exceptions import ConfigurationError, DataFormatError, FileAccessError
from file_manager import FileManager
from mesh_processor import MeshProcessor


def test_tet_round_trip_is_exact(small_box, tmp_path):
    path = FileManager.save_mesh(small_box, tmp_path / "box.tet")
    loaded = FileManager.load_mesh(path)
    np.testing.assert_array_equal(loaded.vertices, small_box.vertices)
    np.testing.assert_array_equal(loaded.tets, small_box.tets)


def test_tet_writer_writes_plain_floats(small_box, tmp_path):
    lines = FileManager.save_mesh(small_box, tmp_path / "box.tet").read_text().splitlines()
    assert lines[1] == "0.0 0.0 0.0"
    assert lines[small_box.n_vertices] == "0.1 0.1 0.1"
    assert all(float(value) >= 0.0 for line in lines[1:1 + small_box.n_vertices] for value in line.split())


def test_tet_reader_skips_comments_and_reorients(tmp_path):
    path = tmp_path / "single.tet"
    path.write_text(
        "# one inverted tet\n"
        "4\n"
        "0 0 0\n1 0 0\n0 1 0\n"
        "0 0 1  # apex\n"
        "\n"
        "1\n"
        "0 2 1 3\n")
    mesh = FileManager.load_mesh(path)
    assert MeshProcessor.tet_volumes(mesh.vertices, mesh.tets)[0] == pytest.approx(1.0 / 6.0)
    assert sorted(mesh.tets[0].tolist()) == [0, 1, 2, 3]


@pytest.mark.parametrize("text", [
    "4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n1\n",
    "4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n1\n0 1 2\n",
    "four\n",
])
def test_malformed_tet_is_rejected(tmp_path, text):
    path = tmp_path / "bad.tet"
    path.write_text(text)
    with pytest.raises(DataFormatError):
        FileManager.load_mesh(path)


def test_tet_writer_applies_displacement(unit_cube, tmp_path):
    u = Displacement(np.tile([0.0, 0.0, 0.25], (unit_cube.n_vertices, 1)))
    deformed = FileManager.load_mesh(FileManager.save_mesh(unit_cube, tmp_path / "moved.tet", u))
    np.testing.assert_array_equal(deformed.vertices, unit_cube.vertices + u.values)


def test_vtk_round_trip_with_displacement(unit_cube, tmp_path, rng):
    u = Displacement(1e-3 * rng.normal(size=(unit_cube.n_vertices, 3)))
    path = FileManager.save_mesh(unit_cube, tmp_path / "deformed.vtk", u)
    loaded = FileManager.load_mesh(path)
    np.testing.assert_allclose(loaded.vertices, unit_cube.vertices + u.values, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(loaded.tets, unit_cube.tets)


def test_xyz_round_trip_is_exact(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(25, 3)))
    loaded = FileManager.load_cloud(FileManager.save_cloud(cloud, tmp_path / "cloud.xyz"))
    np.testing.assert_array_equal(loaded.points, cloud.points)


def test_xyz_single_point_and_bad_width(tmp_path):
    single = tmp_path / "one.xyz"
    single.write_text("# header\n0.1 0.2 0.3\n")
    assert FileManager.load_cloud(single).points.shape == (1, 3)
    wide = tmp_path / "wide.xyz"
    wide.write_text("1 2 3 4\n5 6 7 8\n")
    with pytest.raises(DataFormatError):
        FileManager.load_cloud(wide)


def test_labels_round_trip(small_box, small_box_labels, tmp_path):
    path = FileManager.save_labels(small_box_labels, tmp_path / "labels.json")
    assert FileManager.load_labels(path, small_box) == small_box_labels
    assert json.loads(path.read_text())["fixed"] == sorted(small_box_labels.fixed)


def test_labels_reject_unknown_keys(tmp_path):
    path = tmp_path / "labels.json"
    path.write_text(json.dumps({"matching": [0], "pinned": [1]}))
    with pytest.raises(DataFormatError):
        FileManager.load_labels(path)


def test_labels_validated_against_mesh(small_box, small_box_labels, tmp_path):
    overlapping = small_box_labels.with_updates(
        fixed=set(small_box_labels.fixed) | {int(small_box_labels.loaded_vertices(small_box)[0])})
    path = FileManager.save_labels(overlapping, tmp_path / "labels.json")
    with pytest.raises(ConfigurationError):
        FileManager.load_labels(path, small_box)
    out_of_range = RegionLabels(matching={small_box.n_boundary_tris})
    path = FileManager.save_labels(out_of_range, tmp_path / "range.json")
    with pytest.raises(ConfigurationError):
        FileManager.load_labels(path, small_box)


def test_file_type_dispatch(tmp_path, unit_cube):
    assert FileManager.detect_file_type(tmp_path / "a.VTK") == "mesh"
    assert FileManager.detect_file_type(tmp_path / "a.ply") == "cloud"
    with pytest.raises(DataFormatError):
        FileManager.detect_file_type(tmp_path / "a.stl")
    with pytest.raises(FileAccessError):
        FileManager.load_mesh(tmp_path / "missing.tet")
    cloud_path = FileManager.save_cloud(PointCloud([[0.0, 0.0, 0.0]]), tmp_path / "c.xyz")
    with pytest.raises(DataFormatError):
        FileManager.load_mesh(cloud_path)
    with pytest.raises(DataFormatError):
        FileManager.save_mesh(unit_cube, tmp_path / "mesh.xyz")
    assert FileManager.get_supported_formats()["mesh"] == [".tet", ".vtk"]
