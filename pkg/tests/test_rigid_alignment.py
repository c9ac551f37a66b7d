import numpy as np
import pytest

from data_models import PointCloud, RigidTransform
from exceptions import DegenerateConfigurationError, InvalidArgumentError
from mesh_processor import MeshProcessor
from rigid_alignment import RigidAligner


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis /= np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * k @ k


@pytest.fixture
def ellipsoid():
    return MeshProcessor.generate_ellipsoid_mesh(6, (0.08, 0.06, 0.05))


def surface_cloud(mesh, transform=None):
    points = mesh.vertices[mesh.boundary_vertices()]
    return PointCloud(points if transform is None else transform.apply(points))


def test_best_fit_of_identical_sets_is_identity(rng):
    points = rng.normal(size=(20, 3))
    transform = RigidAligner.best_fit_transform(points, points)
    np.testing.assert_allclose(transform.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(transform.translation, 0.0, atol=1e-12)


def test_best_fit_recovers_known_transform(rng):
    truth = RigidTransform(rotation_about([1.0, 2.0, -0.5], 0.8), [0.1, -0.3, 2.0])
    source = PointCloud(rng.normal(size=(30, 3)))
    target = PointCloud(truth.apply(source.points))
    transform = RigidAligner.best_fit_transform(source, target)
    np.testing.assert_allclose(transform.rotation, truth.rotation, atol=1e-12)
    np.testing.assert_allclose(transform.translation, truth.translation, atol=1e-12)


def test_best_fit_uses_correspondences(rng):
    truth = RigidTransform(rotation_about([0.0, 0.0, 1.0], 0.3), [1.0, 0.0, 0.0])
    source = rng.normal(size=(10, 3))
    order = rng.permutation(10)
    target = truth.apply(source)[order]
    pairs = np.column_stack([order, np.arange(10)])
    transform = RigidAligner.best_fit_transform(source, target, pairs)
    np.testing.assert_allclose(transform.rotation, truth.rotation, atol=1e-12)


def test_reflection_is_never_returned(rng):
    source = rng.normal(size=(15, 3))
    mirrored = source * np.array([-1.0, 1.0, 1.0])
    transform = RigidAligner.best_fit_transform(source, mirrored)
    assert np.linalg.det(transform.rotation) == pytest.approx(1.0)


def test_degenerate_inputs_are_rejected():
    line = np.outer(np.linspace(0.0, 1.0, 5), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        RigidAligner.best_fit_transform(line, line + 1.0)
    with pytest.raises(DegenerateConfigurationError):
        RigidAligner.best_fit_transform(np.eye(3)[:2], np.eye(3)[:2])
    with pytest.raises(DegenerateConfigurationError):
        RigidAligner.best_fit_transform(np.ones((4, 3)), np.ones((4, 3)))
    with pytest.raises(InvalidArgumentError):
        RigidAligner.best_fit_transform(np.eye(3), np.eye(4)[:, :3])


def test_icp_without_iterations_is_identity(ellipsoid):
    transform, history = RigidAligner.icp_align(ellipsoid, surface_cloud(ellipsoid), max_iters=0)
    np.testing.assert_array_equal(transform.rotation, np.eye(3))
    np.testing.assert_array_equal(transform.translation, np.zeros(3))
    assert history == []


def test_icp_on_aligned_cloud_stops_at_once(ellipsoid):
    transform, history = RigidAligner.icp_align(ellipsoid, surface_cloud(ellipsoid))
    assert history[0] == pytest.approx(0.0, abs=1e-30)
    assert len(history) <= 2
    assert transform.rotation_angle() == pytest.approx(0.0, abs=1e-9)


def test_icp_reduces_misalignment(ellipsoid):
    truth = RigidTransform(rotation_about([0.3, -1.0, 0.6], np.radians(3.0)), [2e-3, -1e-3, 1.5e-3])
    cloud = surface_cloud(ellipsoid, truth)
    transform, history = RigidAligner.icp_align(ellipsoid, cloud, max_iters=300, tol=0.0)
    assert np.all(np.diff(history) <= 1e-18)
    assert history[-1] <= 1e-2 * history[0]
    residual = transform.inverse().compose(truth)
    assert residual.rotation_angle() < 0.3 * truth.rotation_angle()
    assert RigidAligner.alignment_error(ellipsoid, cloud, transform) <= history[-1] * (1.0 + 1e-9) + 1e-20


def test_centroid_initialisation_recovers_translation(ellipsoid):
    shift = RigidTransform(np.eye(3), [0.3, -0.1, 0.05])
    transform, history = RigidAligner.icp_align(ellipsoid, surface_cloud(ellipsoid, shift), centroid_init=True)
    np.testing.assert_allclose(transform.translation, shift.translation, atol=1e-9)
    assert history[-1] < 1e-18


@pytest.mark.parametrize("degrees", [3.0, 10.0, 30.0])
def test_icp_recovers_known_transform(ellipsoid, degrees):
    truth = RigidTransform(rotation_about([0.3, -1.0, 0.6], np.radians(degrees)), [2e-3, -1e-3, 1.5e-3])
    transform, _ = RigidAligner.icp_align(ellipsoid, surface_cloud(ellipsoid, truth), max_iters=500, tol=0.0)
    residual = transform.inverse().compose(truth)
    assert residual.rotation_angle() <= 1e-6
    assert np.linalg.norm(transform.translation - truth.translation) <= 1e-8


def test_history_ends_with_the_returned_transform(ellipsoid):
    truth = RigidTransform(rotation_about([1.0, 0.2, 0.0], np.radians(8.0)), [1e-3, 0.0, 0.0])
    cloud = surface_cloud(ellipsoid, truth)
    transform, history = RigidAligner.icp_align(ellipsoid, cloud, max_iters=2, tol=0.0)
    assert len(history) == 3
    assert history[-1] < history[0]
    assert history[-1] == pytest.approx(RigidAligner.alignment_error(ellipsoid, cloud, transform), rel=1e-12)


def test_icp_restricted_to_a_surface_patch(small_box):
    faces = set()
    for axis in range(3):
        faces |= MeshProcessor.select_region(small_box, MeshProcessor.plane_predicate(small_box, axis, "max"))
    patch = np.unique(small_box.boundary_tris[sorted(faces)])
    truth = RigidTransform(rotation_about([0.0, 1.0, 1.0], np.radians(2.0)), [1e-3, 2e-3, -1e-3])
    cloud = PointCloud(truth.apply(small_box.vertices[patch]))
    transform, history = RigidAligner.icp_align(small_box, cloud, max_iters=200, tol=0.0, triangle_ids=faces)
    assert history[-1] <= 1e-20
    np.testing.assert_allclose(transform.rotation, truth.rotation, atol=1e-8)
    np.testing.assert_allclose(transform.translation, truth.translation, atol=1e-9)
