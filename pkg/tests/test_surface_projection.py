import numpy as np
import pytest

from data_models import Displacement, PointCloud, RegionLabels
from exceptions import ConfigurationError, ConsistencyError
from mesh_processor import MeshProcessor
from surface_projection import (SurfaceObjective, SurfaceProjector, AabbTree,
                                closest_point_barycentric)


TRIANGLE = (np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))


@pytest.fixture
def ellipsoid():
    return MeshProcessor.generate_ellipsoid_mesh(5, (0.08, 0.06, 0.05))


@pytest.mark.parametrize("point, expected", [
    ([-1.0, -1.0, 0.5], [1.0, 0.0, 0.0]),
    ([2.0, -0.5, 0.0], [0.0, 1.0, 0.0]),
    ([-0.5, 3.0, -1.0], [0.0, 0.0, 1.0]),
    ([0.5, -1.0, 1.0], [0.5, 0.5, 0.0]),
    ([1.0, 1.0, 0.0], [0.0, 0.5, 0.5]),
    ([-2.0, 0.25, 0.0], [0.75, 0.0, 0.25]),
    ([0.2, 0.2, 3.0], [0.6, 0.2, 0.2]),
])
def test_closest_point_regions(point, expected):
    bary = closest_point_barycentric(np.array([point]), *TRIANGLE)
    np.testing.assert_allclose(bary[0], expected, atol=1e-15)


def test_tree_agrees_with_exhaustive_scan(ellipsoid, rng):
    u = Displacement(2e-3 * rng.normal(size=(ellipsoid.n_vertices, 3)))
    points = rng.uniform(-0.1, 0.1, size=(200, 3))
    projections = SurfaceProjector(ellipsoid, u, leaf_size=4).project_cloud(points)
    for j, y in enumerate(points):
        oracle = SurfaceObjective.exhaustive_projection(ellipsoid, u, y)
        assert projections.sq_distances[j] == pytest.approx(
            np.sum((oracle.position - y) ** 2), rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(projections.positions[j], oracle.position, atol=1e-12)


def test_ties_resolve_to_lowest_triangle_id(unit_cube):
    # outside the corner (1, 1, 1); every triangle through that vertex is equally close
    corner = int(np.flatnonzero(np.all(unit_cube.vertices == 1.0, axis=1))[0])
    touching = np.flatnonzero(np.any(unit_cube.boundary_tris == corner, axis=1))
    projection = SurfaceProjector(unit_cube).project_point([1.5, 1.5, 1.5])
    assert projection.triangle_id == touching.min()
    np.testing.assert_allclose(projection.position, [1.0, 1.0, 1.0])


def test_point_on_surface_projects_to_itself(small_box):
    vertex = small_box.boundary_vertices()[7]
    y = small_box.vertices[vertex]
    projection = SurfaceProjector(small_box).project_point(y)
    assert projection.distance_to(y) == pytest.approx(0.0, abs=1e-14)


def test_face_interior_foot(small_box):
    y = np.array([0.031, 0.062, 0.13])
    projection = SurfaceProjector(small_box).project_point(y)
    np.testing.assert_allclose(projection.position, [0.031, 0.062, 0.1], atol=1e-14)
    assert np.all(projection.barycentric > 0.0)


def test_single_point_functional_is_half_squared_distance(small_box):
    cloud = PointCloud([[0.05, 0.05, 0.1 + 0.02]])
    value, projections = SurfaceObjective.functional(small_box, None, cloud)
    assert value == pytest.approx(0.5 * 0.02 ** 2, rel=1e-12)
    assert len(projections) == 1


def test_restricted_projection_stays_on_matching(small_box, small_box_labels, rng):
    cloud = PointCloud(rng.uniform(-0.05, 0.15, size=(50, 3)))
    projections = SurfaceObjective.project_cloud(small_box, None, cloud, small_box_labels)
    assert set(projections.triangle_ids.tolist()) <= small_box_labels.matching
    unrestricted = SurfaceObjective.project_cloud(small_box, None, cloud, small_box_labels, restrict=False)
    assert np.all(unrestricted.sq_distances <= projections.sq_distances + 1e-18)


def test_empty_matching_is_rejected(small_box):
    assert SurfaceObjective.matching_triangles(None) is None
    with pytest.raises(ConfigurationError):
        SurfaceObjective.matching_triangles(RegionLabels(loaded={0}))
    with pytest.raises(ConfigurationError):
        SurfaceProjector(small_box, triangle_ids=[])


def test_gradient_is_frozen_functional_derivative(ellipsoid, rng):
    u = Displacement(1e-3 * rng.normal(size=(ellipsoid.n_vertices, 3)))
    cloud = PointCloud(rng.uniform(-0.09, 0.09, size=(60, 3)))
    _, projections = SurfaceObjective.functional(ellipsoid, u, cloud)
    gradient = SurfaceObjective.functional_gradient(ellipsoid, u, cloud, projections).reshape(-1)
    h = 1e-7
    for dof in np.flatnonzero(gradient)[:10]:
        plus, minus = u.values.copy().reshape(-1), u.values.copy().reshape(-1)
        plus[dof] += h
        minus[dof] -= h
        fd = (SurfaceObjective.frozen_functional(ellipsoid, Displacement(plus), cloud, projections)
              - SurfaceObjective.frozen_functional(ellipsoid, Displacement(minus), cloud, projections)) / (2 * h)
        assert fd == pytest.approx(gradient[dof], rel=1e-6, abs=1e-12)


def test_gradient_support_and_resultant(small_box, small_box_labels, rng):
    cloud = PointCloud(rng.uniform(0.0, 0.1, size=(30, 3)) + [0.0, 0.0, 0.05])
    _, projections = SurfaceObjective.functional(small_box, None, cloud, small_box_labels)
    gradient = SurfaceObjective.functional_gradient(small_box, None, cloud, projections)
    touched = np.unique(small_box.boundary_tris[projections.triangle_ids])
    untouched = np.setdiff1d(np.arange(small_box.n_vertices), touched)
    np.testing.assert_array_equal(gradient[untouched], 0.0)
    expected = (projections.positions - cloud.points).mean(axis=0)
    np.testing.assert_allclose(gradient.sum(axis=0), expected, atol=1e-15)


def test_stale_projections_are_rejected(small_box, small_box_labels, rng):
    cloud = PointCloud(rng.uniform(0.0, 0.1, size=(20, 3)))
    _, projections = SurfaceObjective.functional(small_box, None, cloud, small_box_labels)
    moved = np.zeros((small_box.n_vertices, 3))
    moved[small_box_labels.loaded_vertices(small_box), 2] = 1e-3
    with pytest.raises(ConsistencyError):
        SurfaceObjective.functional_gradient(small_box, Displacement(moved), cloud, projections)
    with pytest.raises(ConsistencyError):
        SurfaceObjective.functional_gradient(small_box, None, PointCloud(cloud.points[:5]), projections)


def test_projection_commutes_with_translation(ellipsoid, rng):
    shift = np.array([0.3, -0.2, 0.1])
    points = rng.uniform(-0.1, 0.1, size=(40, 3))
    base = SurfaceProjector(ellipsoid).project_cloud(points)
    moved = SurfaceProjector(ellipsoid, Displacement(np.tile(shift, (ellipsoid.n_vertices, 1))))
    shifted = moved.project_cloud(points + shift)
    np.testing.assert_allclose(shifted.positions, base.positions + shift, atol=1e-12)
    np.testing.assert_allclose(shifted.sq_distances, base.sq_distances, rtol=1e-9, atol=1e-15)


def test_tree_leaf_size_does_not_change_answers(ellipsoid, rng):
    points = rng.uniform(-0.1, 0.1, size=(100, 3))
    positions, triangles = ellipsoid.vertices, ellipsoid.boundary_tris
    _, _, coarse = AabbTree(positions, triangles, leaf_size=64).nearest(points)
    _, _, fine = AabbTree(positions, triangles, leaf_size=1).nearest(points)
    np.testing.assert_allclose(coarse, fine, rtol=1e-12, atol=1e-30)
