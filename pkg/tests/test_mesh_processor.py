from collections import Counter

import numpy as np
import pytest

from data_models import TetMesh
from mesh_processor import MeshProcessor
from exceptions import InvalidMeshError, InvalidArgumentError


SINGLE_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def brute_force_boundary(tets):
    counts = Counter()
    for tet in tets:
        for skip in range(4):
            counts[tuple(sorted(v for k, v in enumerate(tet) if k != skip))] += 1
    return {face for face, n in counts.items() if n == 1}


def test_single_tet_has_four_outward_faces():
    mesh = TetMesh(SINGLE_TET, [[0, 1, 2, 3]])
    assert mesh.n_boundary_tris == 4
    assert MeshProcessor.boundary_orientation_defects(mesh).size == 0
    # face opposite vertex 0 points away from the origin
    normal = MeshProcessor.triangle_normals(mesh.vertices, mesh.boundary_tris[:1])[0]
    np.testing.assert_allclose(normal, np.ones(3) / np.sqrt(3.0), atol=1e-12)


def test_glued_tets_drop_the_shared_face():
    vertices = np.vstack([SINGLE_TET, [1.0, 1.0, 1.0]])
    mesh = TetMesh(vertices, [[0, 1, 2, 3], [1, 2, 3, 4]])
    faces = {tuple(sorted(t)) for t in mesh.boundary_tris.tolist()}
    assert len(faces) == 6
    assert (1, 2, 3) not in faces
    assert MeshProcessor.boundary_orientation_defects(mesh).size == 0


def test_cube_boundary_matches_face_census(unit_cube):
    faces = {tuple(sorted(t)) for t in unit_cube.boundary_tris.tolist()}
    assert faces == brute_force_boundary(unit_cube.tets.tolist())
    # 6 sides x 4 cells x 2 triangles
    assert unit_cube.n_boundary_tris == 48


def test_boundary_ordering_follows_owner_then_local_face(unit_cube):
    _, owners, local = MeshProcessor.boundary_census(unit_cube.tets)
    keys = 4 * owners + local
    assert np.all(np.diff(keys) > 0)


def test_boundary_census_is_stable(unit_cube):
    first = MeshProcessor.extract_boundary(unit_cube)
    second = MeshProcessor.extract_boundary(unit_cube)
    np.testing.assert_array_equal(first, second)


def test_face_shared_by_three_tets_is_rejected():
    tets = np.array([[0, 1, 2, 3], [0, 2, 1, 4], [0, 1, 2, 5]])
    with pytest.raises(InvalidMeshError):
        MeshProcessor.boundary_census(tets)


def test_zero_volume_tet_is_rejected():
    flat = SINGLE_TET.copy()
    flat[3] = [0.5, 0.5, 0.0]
    with pytest.raises(InvalidMeshError):
        TetMesh(flat, [[0, 1, 2, 3]])


@pytest.mark.parametrize("cells, n_vertices, n_tets", [
    ((1, 1, 1), 8, 6),
    ((2, 1, 1), 12, 12),
    ((3, 2, 4), 4 * 3 * 5, 6 * 24),
])
def test_box_counts(cells, n_vertices, n_tets):
    mesh = MeshProcessor.generate_box_mesh(*cells)
    assert mesh.n_vertices == n_vertices
    assert mesh.n_tets == n_tets


def test_box_volume_is_partitioned():
    mesh = MeshProcessor.generate_box_mesh(3, 2, 4, (0.3, 0.2, 0.5), (1.0, -2.0, 0.5))
    volumes = MeshProcessor.tet_volumes(mesh.vertices, mesh.tets)
    assert np.all(volumes > 0.0)
    assert volumes.sum() == pytest.approx(0.3 * 0.2 * 0.5, rel=1e-12)


@pytest.mark.parametrize("cells", [(0, 1, 1), (1, -2, 1), (1.5, 1, 1)])
def test_box_rejects_bad_counts(cells):
    with pytest.raises(InvalidArgumentError):
        MeshProcessor.generate_box_mesh(*cells)


def test_box_rejects_bad_extents():
    with pytest.raises(InvalidArgumentError):
        MeshProcessor.generate_box_mesh(1, 1, 1, (1.0, 0.0, 1.0))


def test_closed_boundary_area_vectors_cancel(small_box):
    total_area = MeshProcessor.triangle_areas(small_box.vertices, small_box.boundary_tris).sum()
    assert np.linalg.norm(MeshProcessor.boundary_area_vector_sum(small_box)) <= 1e-10 * total_area


def test_ellipsoid_is_a_valid_closed_mesh():
    mesh = MeshProcessor.generate_ellipsoid_mesh(6, (0.08, 0.06, 0.05))
    assert mesh.n_tets > 0
    assert MeshProcessor.boundary_orientation_defects(mesh).size == 0
    total_area = MeshProcessor.triangle_areas(mesh.vertices, mesh.boundary_tris).sum()
    assert np.linalg.norm(MeshProcessor.boundary_area_vector_sum(mesh)) <= 1e-10 * total_area
    # every vertex is used by some tet
    assert np.array_equal(np.unique(mesh.tets), np.arange(mesh.n_vertices))


def test_top_face_selection(unit_cube):
    top = MeshProcessor.select_region(unit_cube, MeshProcessor.plane_predicate(unit_cube, 2, "max"))
    assert len(top) == 8
    centroids = MeshProcessor.triangle_centroids(unit_cube.vertices, unit_cube.boundary_tris)
    expected = {i for i, c in enumerate(centroids) if abs(c[2] - 1.0) < 1e-12}
    assert top == expected


def test_false_predicate_selects_nothing(unit_cube):
    assert MeshProcessor.select_region(unit_cube, lambda c: np.zeros(len(c), dtype=bool)) == set()


def test_ball_selection_matches_exhaustive_scan(small_box):
    centroids = MeshProcessor.triangle_centroids(small_box.vertices, small_box.boundary_tris)
    center, radius = centroids[17], 0.03
    selected = MeshProcessor.select_region(small_box, MeshProcessor.ball_predicate(center, radius))
    expected = {i for i, c in enumerate(centroids) if np.linalg.norm(c - center) <= radius}
    assert 17 in selected
    assert selected == expected


def test_nearest_selector_within_a_face(small_box):
    selector = {"type": "nearest", "center": [0.05, 0.05, 0.0], "count": 6,
            "within": {"type": "plane", "axis": 2, "side": "min"}}
    chosen = MeshProcessor.selector_from_config(small_box, selector)
    assert len(chosen) == 6
    centroids = MeshProcessor.triangle_centroids(small_box.vertices, small_box.boundary_tris[sorted(chosen)])
    np.testing.assert_allclose(centroids[:, 2], 0.0, atol=1e-12)


def test_complement_selector(unit_cube):
    top = MeshProcessor.selector_from_config(unit_cube, {"type": "plane", "axis": 2, "side": "max"})
    rest = MeshProcessor.selector_from_config(
        unit_cube, {"type": "complement", "of": {"type": "plane", "axis": 2, "side": "max"}})
    assert top | rest == set(range(unit_cube.n_boundary_tris))
    assert not top & rest


def test_adjacent_pair_near_returns_neighbours(small_box):
    first, second = MeshProcessor.adjacent_pair_near(small_box, [0.05, 0.05, 0.1])
    assert MeshProcessor.triangles_adjacent(small_box, first, second)


def test_locate_and_interpolate_reproduce_linear_fields(small_box, rng):
    A = rng.normal(size=(3, 3))
    c = rng.normal(size=3)
    values = small_box.vertices @ A.T + c
    points = rng.uniform(0.01, 0.09, size=(20, 3))
    tet_ids, weights = MeshProcessor.locate_points(small_box, points)
    assert np.all(weights >= -1e-9)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(MeshProcessor.interpolate_displacement(small_box, values, points),
                               points @ A.T + c, atol=1e-12)


def test_locate_rejects_outside_points(small_box):
    with pytest.raises(InvalidArgumentError):
        MeshProcessor.locate_points(small_box, [[0.5, 0.5, 0.5]])
