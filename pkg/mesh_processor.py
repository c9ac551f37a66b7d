from itertools import permutations
from typing import Callable, Dict, Any, Iterable, Set, Tuple
import numpy as np

from data_models import TetMesh
from exceptions import InvalidMeshError, InvalidArgumentError, ConfigurationError
from loggers import get_logger

logger = get_logger(__name__)

# Outward faces of a positively oriented tet (v0, v1, v2, v3). Row k is the
# face opposite local vertex k.
LOCAL_FACES = np.array([
    [1, 2, 3],
    [0, 3, 2],
    [0, 1, 3],
    [0, 2, 1],
], dtype=np.int64)

CentroidPredicate = Callable[[np.ndarray], np.ndarray]


class MeshProcessor:
    """Tetrahedral mesh construction, boundary census and region selection"""

    @staticmethod
    def boundary_census(tets: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """faces appearing in exactly one tet, ordered by (owning tet, local face)"""
        tets = np.asarray(tets, dtype=np.int64)
        faces = tets[:, LOCAL_FACES].reshape(-1, 3)
        keys = np.sort(faces, axis=1)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if counts.max(initial=0) > 2:
            bad = int(np.flatnonzero(counts[inverse] > 2)[0])
            raise InvalidMeshError(
                f"Face {faces[bad].tolist()} is shared by {counts[inverse[bad]]} tets")
        on_boundary = np.flatnonzero(counts[inverse] == 1)
        owners = on_boundary // 4
        local = on_boundary % 4
        return faces[on_boundary], owners, local

    @staticmethod
    def extract_boundary(mesh: TetMesh) -> np.ndarray:
        """outward-oriented boundary triangles of the mesh"""
        tris, _, _ = MeshProcessor.boundary_census(mesh.tets)
        return tris

    @staticmethod
    def tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
        x = np.asarray(vertices)[np.asarray(tets)]
        edges = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
        return np.linalg.det(edges) / 6.0

    @staticmethod
    def triangle_area_vectors(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
        """half cross products; their norm is the area, their direction the normal"""
        x = np.asarray(vertices)[np.asarray(tris)]
        return 0.5 * np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])

    @staticmethod
    def triangle_areas(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
        return np.linalg.norm(MeshProcessor.triangle_area_vectors(vertices, tris), axis=1)

    @staticmethod
    def triangle_normals(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
        area_vectors = MeshProcessor.triangle_area_vectors(vertices, tris)
        return area_vectors / np.linalg.norm(area_vectors, axis=1, keepdims=True)

    @staticmethod
    def triangle_centroids(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
        return np.asarray(vertices)[np.asarray(tris)].mean(axis=1)

    @staticmethod
    def boundary_orientation_defects(mesh: TetMesh) -> np.ndarray:
        """boundary triangles whose normal points towards their tet's opposite vertex"""
        tris, owners, local = MeshProcessor.boundary_census(mesh.tets)
        x = mesh.vertices
        opposite = x[mesh.tets[owners, local]]
        a, b, c = x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]
        triple = np.einsum("ij,ij->i", np.cross(b - a, c - a), opposite - a)
        return np.flatnonzero(triple >= 0.0)

    @staticmethod
    def generate_box_mesh(nx: int, ny: int, nz: int, lengths=(1.0, 1.0, 1.0),
                          origin=(0.0, 0.0, 0.0)) -> TetMesh:
        """structured grid over a box, each cell split into 6 tets along its main diagonal"""
        counts = (nx, ny, nz)
        if any(int(n) != n or n < 1 for n in counts):
            raise InvalidArgumentError(f"Cell counts must be integers >= 1, got {counts}")
        lengths = np.asarray(lengths, dtype=np.float64)
        if lengths.shape != (3,) or np.any(lengths <= 0.0):
            raise InvalidArgumentError(f"Box extents must be three positive lengths, got {lengths}")
        nx, ny, nz = (int(n) for n in counts)

        gi, gj, gk = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
        # vertex id = i + (nx+1) * (j + (ny+1) * k)
        grid = np.stack([gi.ravel(order="F"), gj.ravel(order="F"), gk.ravel(order="F")], axis=1)
        vertices = np.asarray(origin, dtype=np.float64) + grid / np.array([nx, ny, nz]) * lengths

        ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        cells = np.stack([ci.ravel(order="F"), cj.ravel(order="F"), ck.ravel(order="F")], axis=1)

        def corner_ids(offset) -> np.ndarray:
            p = cells + np.asarray(offset)
            return p[:, 0] + (nx + 1) * (p[:, 1] + (ny + 1) * p[:, 2])

        tets = []
        for order in permutations(range(3)):
            path = [np.zeros(3, dtype=np.int64)]
            for axis in order:
                step = path[-1].copy()
                step[axis] = 1
                path.append(step)
            if np.linalg.det(np.array(path[1:], dtype=np.float64)) < 0.0:
                path[2], path[3] = path[3], path[2]
            tets.append(np.stack([corner_ids(c) for c in path], axis=1))
        # cell-major ordering keeps neighbouring tets close in memory
        tets = np.stack(tets, axis=1).reshape(-1, 4)

        mesh = TetMesh(vertices, tets)
        logger.debug(f"Generated box mesh {nx}x{ny}x{nz}: {mesh}")
        return mesh

    @staticmethod
    def generate_ellipsoid_mesh(n: int, semi_axes=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TetMesh:
        """grid cells whose centre lies inside the ellipsoid; unused grid vertices dropped"""
        semi_axes = np.asarray(semi_axes, dtype=np.float64)
        center = np.asarray(center, dtype=np.float64)
        if semi_axes.shape != (3,) or np.any(semi_axes <= 0.0):
            raise InvalidArgumentError(f"Semi-axes must be three positive lengths, got {semi_axes}")
        grid = MeshProcessor.generate_box_mesh(n, n, n, 2.0 * semi_axes, center - semi_axes)

        # the 6 tets of a cell are stored consecutively; their centroids average to the cell centre
        cell_tets = grid.tets.reshape(-1, 6, 4)
        cell_centers = grid.vertices[cell_tets].mean(axis=(1, 2))
        inside = (((cell_centers - center) / semi_axes) ** 2).sum(axis=1) <= 1.0
        if not inside.any():
            raise InvalidArgumentError(f"No grid cell of a {n}^3 grid lies inside the ellipsoid")
        used, remap = np.unique(cell_tets[inside].reshape(-1, 4), return_inverse=True)
        mesh = TetMesh(grid.vertices[used], remap.reshape(-1, 4))
        logger.debug(f"Generated ellipsoid mesh from a {n}^3 grid: {mesh}")
        return mesh

    @staticmethod
    def select_region(mesh: TetMesh, predicate: CentroidPredicate) -> Set[int]:
        """boundary triangles whose centroid satisfies the predicate"""
        centroids = MeshProcessor.triangle_centroids(mesh.vertices, mesh.boundary_tris)
        mask = np.asarray(predicate(centroids), dtype=bool)
        if mask.shape != (centroids.shape[0],):
            raise InvalidArgumentError("Predicate must return one boolean per centroid")
        selected = {int(i) for i in np.flatnonzero(mask)}
        if not selected:
            logger.warning("Region selection matched no boundary triangle")
        return selected

    @staticmethod
    def plane_predicate(mesh: TetMesh, axis: int, side: str = "max", rtol: float = 1e-9) -> CentroidPredicate:
        lower, upper = mesh.bounding_box()
        tol = rtol * mesh.diameter()
        if side == "max":
            return lambda c: c[:, axis] >= upper[axis] - tol
        if side == "min":
            return lambda c: c[:, axis] <= lower[axis] + tol
        raise InvalidArgumentError(f"Plane side must be 'min' or 'max', got {side!r}")

    @staticmethod
    def ball_predicate(center, radius: float) -> CentroidPredicate:
        center = np.asarray(center, dtype=np.float64)
        return lambda c: np.linalg.norm(c - center, axis=1) <= radius

    @staticmethod
    def box_predicate(lower, upper) -> CentroidPredicate:
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        return lambda c: np.all((c >= lower) & (c <= upper), axis=1)

    @staticmethod
    def nearest_triangles(mesh: TetMesh, center, count: int, candidates: Iterable[int] = None) -> Set[int]:
        """the `count` candidate triangles whose centroid is closest to a point"""
        ids = (np.arange(mesh.n_boundary_tris) if candidates is None
               else np.array(sorted(candidates), dtype=np.int64))
        centroids = MeshProcessor.triangle_centroids(mesh.vertices, mesh.boundary_tris[ids])
        dist = np.linalg.norm(centroids - np.asarray(center, dtype=np.float64), axis=1)
        order = np.lexsort((ids, dist))
        return {int(i) for i in ids[order[:count]]}

    @staticmethod
    def nearest_vertices(mesh: TetMesh, center, count: int, candidates: Iterable[int] = None) -> np.ndarray:
        ids = (np.arange(mesh.n_vertices) if candidates is None
               else np.array(sorted(candidates), dtype=np.int64))
        dist = np.linalg.norm(mesh.vertices[ids] - np.asarray(center, dtype=np.float64), axis=1)
        order = np.lexsort((ids, dist))
        return np.sort(ids[order[:count]])

    @staticmethod
    def selector_from_config(mesh: TetMesh, selector: Dict[str, Any]) -> Set[int]:
        """triangle ids from a JSON selector (plane, ball, box, nearest, complement, ids)"""
        kind = selector.get("type")
        if kind == "plane":
            return MeshProcessor.select_region(
                mesh, MeshProcessor.plane_predicate(mesh, int(selector["axis"]), selector.get("side", "max")))
        if kind == "ball":
            return MeshProcessor.select_region(
                mesh, MeshProcessor.ball_predicate(selector["center"], float(selector["radius"])))
        if kind == "box":
            return MeshProcessor.select_region(
                mesh, MeshProcessor.box_predicate(selector["lower"], selector["upper"]))
        if kind == "nearest":
            within = selector.get("within")
            candidates = MeshProcessor.selector_from_config(mesh, within) if within else None
            return MeshProcessor.nearest_triangles(mesh, selector["center"], int(selector["count"]), candidates)
        if kind == "complement":
            excluded = MeshProcessor.selector_from_config(mesh, selector["of"])
            return set(range(mesh.n_boundary_tris)) - excluded
        if kind == "ids":
            return {int(i) for i in selector["ids"]}
        raise ConfigurationError(f"Unknown region selector type: {kind!r}")

    @staticmethod
    def region_vertices(mesh: TetMesh, triangle_ids: Iterable[int]) -> np.ndarray:
        ids = np.array(sorted(triangle_ids), dtype=np.int64)
        if ids.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(mesh.boundary_tris[ids])

    @staticmethod
    def triangles_adjacent(mesh: TetMesh, first: int, second: int) -> bool:
        """two distinct boundary triangles sharing an edge"""
        if first == second:
            return False
        shared = np.intersect1d(mesh.boundary_tris[first], mesh.boundary_tris[second])
        return shared.size == 2

    @staticmethod
    def adjacent_pair_near(mesh: TetMesh, center, candidates: Iterable[int] = None) -> Tuple[int, int]:
        """closest candidate triangle to a point and its closest edge neighbour"""
        ids = (np.arange(mesh.n_boundary_tris) if candidates is None
               else np.array(sorted(candidates), dtype=np.int64))
        centroids = MeshProcessor.triangle_centroids(mesh.vertices, mesh.boundary_tris[ids])
        dist = np.linalg.norm(centroids - np.asarray(center, dtype=np.float64), axis=1)
        order = ids[np.lexsort((ids, dist))]
        first = int(order[0])
        for other in order[1:]:
            if MeshProcessor.triangles_adjacent(mesh, first, int(other)):
                return first, int(other)
        raise ConfigurationError(f"Triangle {first} has no adjacent candidate")

    @staticmethod
    def boundary_area_vector_sum(mesh: TetMesh) -> np.ndarray:
        return MeshProcessor.triangle_area_vectors(mesh.vertices, mesh.boundary_tris).sum(axis=0)

    @staticmethod
    def locate_points(mesh: TetMesh, points, tol: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
        """containing tet and its 4 barycentric coordinates for each point"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        x = mesh.vertices[mesh.tets]
        origin = x[:, 0]
        edges = np.stack([x[:, 1] - origin, x[:, 2] - origin, x[:, 3] - origin], axis=2)
        inverse = np.linalg.inv(edges)

        tet_ids = np.empty(points.shape[0], dtype=np.int64)
        weights = np.empty((points.shape[0], 4))
        for i, p in enumerate(points):
            lam = np.einsum("tij,tj->ti", inverse, p - origin)
            lam = np.column_stack([1.0 - lam.sum(axis=1), lam])
            best = int(np.argmax(lam.min(axis=1)))
            if lam[best].min() < -tol:
                raise InvalidArgumentError(f"Point {p.tolist()} lies outside the mesh")
            tet_ids[i] = best
            weights[i] = lam[best]
        return tet_ids, weights

    @staticmethod
    def interpolate_displacement(mesh: TetMesh, values: np.ndarray, points) -> np.ndarray:
        """P1 interpolation of a nodal field at interior points"""
        tet_ids, weights = MeshProcessor.locate_points(mesh, points)
        nodal = np.asarray(values).reshape(-1, 3)[mesh.tets[tet_ids]]
        return np.einsum("pk,pkj->pj", weights, nodal)
